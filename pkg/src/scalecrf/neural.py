"""Feed-forward potential networks with hand-written reverse mode.

Inputs are row-batched: ``x`` has shape (N, input_dim) or (input_dim,).
Parameters are exposed as a flat list ``[W0, b0, W1, b1, ...]`` (``b`` is
``None`` for bias-free layers) so optimizers can treat every net uniformly.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(z, out, kind):
    """Derivative w.r.t. the pre-activation; relu uses 0 at z == 0."""
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "sigmoid":
        return out * (1.0 - out)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray | None  # (out,) or None
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class Mlp:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError("layer dimensions do not chain")

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[0]

    def params(self):
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def copy(self):
        return Mlp([Layer(l.weight.copy(), None if l.bias is None else l.bias.copy(),
                          l.activation) for l in self.layers])


@dataclass
class Tape:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    post: list  # output of each layer
    squeeze: bool


def forward(net, x):
    """Returns ``(y, tape)``; the tape holds what :func:`backward` needs."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None] if squeeze else x
    if h.shape[-1] != net.input_dim:
        raise ValueError(f"input dim {h.shape[-1]} != {net.input_dim}")
    inputs, pre, post = [], [], []
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight.T
        if layer.bias is not None:
            z = z + layer.bias
        h = activate(z, layer.activation)
        pre.append(z)
        post.append(h)
    return (h[0] if squeeze else h), Tape(inputs, pre, post, squeeze)


def backward(net, tape, dl_dy):
    """Returns ``(grads, dL/dx)`` with ``grads`` aligned to ``net.params()``."""
    g = np.asarray(dl_dy, dtype=np.float64)
    if tape.squeeze:
        g = g[None]
    if len(tape.pre) != len(net.layers) or g.shape != tape.post[-1].shape:
        raise ValueError("stale tape: shapes do not match this network")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if tape.pre[i].shape[-1] != layer.weight.shape[0]:
            raise ValueError("stale tape: shapes do not match this network")
        gz = g * activation_grad(tape.pre[i], tape.post[i], layer.activation)
        grads[2 * i] = gz.T @ tape.inputs[i]
        if layer.bias is not None:
            grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ layer.weight
    return grads, (g[0] if tape.squeeze else g)


def init_params(sizes, activations, seed, final_bias=True):
    """Uniform fan-in init: ``W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases.

    ``sizes`` is ``[input_dim, hidden..., output_dim]`` and ``activations``
    gives one entry per layer.
    """
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    rng = make_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        last = i == len(sizes) - 2
        b = None if (last and not final_bias) else np.zeros(fan_out)
        layers.append(Layer(w, b, activations[i]))
    return Mlp(layers)


def to_record(net):
    """JSON-ready dict; floats kept via ``repr`` round-trip so files are byte-stable."""
    return {
        "layers": [
            {
                "activation": l.activation,
                "weight": l.weight.tolist(),
                "bias": None if l.bias is None else l.bias.tolist(),
            }
            for l in net.layers
        ]
    }


def from_record(rec):
    return Mlp([
        Layer(np.array(l["weight"], dtype=np.float64),
              None if l["bias"] is None else np.array(l["bias"], dtype=np.float64),
              l["activation"])
        for l in rec["layers"]
    ])
