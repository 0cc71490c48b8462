"""Structured models whose potentials come from :mod:`scalecrf.neural` nets.

Both models expose the same surface to the training loops:

* ``params()`` -- flat list of parameter arrays, updated in place;
* ``unary_idx`` / ``pairwise_idx`` -- which entries of ``params()`` belong
  to the unary predictor and to the pairwise part;
* ``loss_and_grads(batch, scaling)`` and ``unary_loss_and_grads(batch)``;
* ``eval_loss(batch, scaling)``, ``predict(batch, scaling)``,
  ``unary_predict(batch)``, ``ratio(batch, scaling)``.

A batch is a :class:`Batch`: instances grouped into equal-length stacks.
"""

import json
import math

import numpy as np

from . import chain_crf, gcrf, neural
from .numerics import DEFAULT_CG_TOL, log_softmax
from .scaling import ScalingState, chain_transform

CHECKPOINT_FORMAT = "scalecrf.model"
CHECKPOINT_VERSION = 1
OBJECTIVES = ("nll", "ce_exact", "ce_meanfield", "ssvm")


class Batch:
    """Instances grouped by length: ``groups`` is a list of ``(idx, X, Y)``."""

    def __init__(self, features, labels, index=None):
        index = list(range(len(labels))) if index is None else list(index)
        by_len = {}
        for i in index:
            by_len.setdefault(len(labels[i]), []).append(i)
        self.groups = []
        for L in sorted(by_len):
            idx = by_len[L]
            X = np.stack([features[i] for i in idx])
            Y = np.stack([labels[i] for i in idx]).astype(np.int64)
            self.groups.append((idx, X, Y))
        self.size = len(index)

    @classmethod
    def of(cls, ds, index=None):
        return cls(ds.features, ds.labels, index)

    def scatter(self, per_group):
        """Map per-group row results back to instance order (sorted by index)."""
        out = {}
        for (idx, _, _), rows in zip(self.groups, per_group):
            for i, r in zip(idx, rows):
                out[i] = r
        return [out[i] for i in sorted(out)]


def minibatches(ds, batch_size, rng):
    """Shuffled equal-length minibatches (one length per minibatch)."""
    by_len = {}
    for i, y in enumerate(ds.labels):
        by_len.setdefault(len(y), []).append(i)
    chunks = []
    for L in sorted(by_len):
        idx = np.array(by_len[L])
        rng.shuffle(idx)
        chunks += [idx[k:k + batch_size] for k in range(0, len(idx), batch_size)]
    order = rng.permutation(len(chunks))
    return [Batch(ds.features, ds.labels, chunks[k]) for k in order]


def _zeros_like(params):
    return [np.zeros_like(p) for p in params]


class ChainModel:
    """Linear-chain CRF: MLP unaries per position, one learned transition matrix."""

    kind = "chain"

    def __init__(self, unary_net, pairwise, objective="ce_exact", mf_sweeps=10):
        if objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {objective!r}")
        self.unary_net = unary_net
        self.pairwise = np.asarray(pairwise, dtype=np.float64)
        self.objective = objective
        self.mf_sweeps = mf_sweeps

    @classmethod
    def build(cls, n_features, n_labels, hidden, seed, objective="ce_exact",
              final_activation="relu", pairwise_init=0.1, final_bias=True, mf_sweeps=10):
        sizes = [n_features, *hidden, n_labels]
        acts = ["relu"] * len(hidden) + [final_activation]
        net = neural.init_params(sizes, acts, seed, final_bias=final_bias)
        rng = np.random.Generator(np.random.PCG64(seed + 7919))
        pairwise = rng.uniform(-pairwise_init, pairwise_init, size=(n_labels, n_labels))
        return cls(net, pairwise, objective, mf_sweeps)

    @property
    def n_labels(self):
        return self.pairwise.shape[0]

    def params(self):
        return [p for p in self.unary_net.params() if p is not None] + [self.pairwise]

    @property
    def unary_idx(self):
        return list(range(len(self.params()) - 1))

    @property
    def pairwise_idx(self):
        return [len(self.params()) - 1]

    def _unaries(self, X):
        B, L, F = X.shape
        out, tape = neural.forward(self.unary_net, X.reshape(B * L, F))
        return out.reshape(B, L, -1), tape

    def _net_grads(self, tape, gU):
        grads, _ = neural.backward(self.unary_net, tape, gU.reshape(-1, gU.shape[-1]))
        return [g for g in grads if g is not None]

    def _objective(self, U, W, Y):
        if self.objective == "nll":
            return chain_crf.batch_loss_nll(U, W, Y)
        if self.objective == "ce_exact":
            return chain_crf.batch_loss_ce(U, W, Y)
        if self.objective == "ce_meanfield":
            return chain_crf.batch_loss_ce(U, W, Y, self.mf_sweeps)
        loss, gU, gW, _ = chain_crf.batch_loss_ssvm(U, W, Y)
        return loss, gU, gW

    def loss_and_grads(self, batch, scaling):
        """Mean objective (plus ratio penalty) over the batch and its gradients."""
        n = batch.size
        grads = _zeros_like(self.params())
        total = 0.0
        for _, X, Y in batch.groups:
            U, tape = self._unaries(X)
            u_eff, w_eff, pen, back = chain_transform(scaling, U, self.pairwise)
            loss, gU, gW = self._objective(u_eff, w_eff, Y)
            total += loss.sum() + pen.sum()
            gu, gw = back(gU / n, gW / n, 1.0 / n)
            for k, g in enumerate(self._net_grads(tape, gu)):
                grads[k] += g
            grads[-1] += gw
        return total / n, grads

    def unary_loss_and_grads(self, batch):
        """Per-position softmax CE on the raw unaries (structure ignored)."""
        n = batch.size
        grads = _zeros_like(self.params())
        total = 0.0
        for _, X, Y in batch.groups:
            U, tape = self._unaries(X)
            L = U.shape[1]
            log_p = log_softmax(U, axis=2)
            total += -np.take_along_axis(log_p, Y[:, :, None], axis=2).sum() / L
            gU = (np.exp(log_p) - np.eye(self.n_labels)[Y]) / (L * n)
            for k, g in enumerate(self._net_grads(tape, gU)):
                grads[k] += g
        return total / n, grads

    def eval_loss(self, batch, scaling):
        total = 0.0
        for _, X, Y in batch.groups:
            U, _ = self._unaries(X)
            u_eff, w_eff, pen, _ = chain_transform(scaling, U, self.pairwise)
            if self.objective == "ssvm":
                loss = chain_crf.batch_loss_ssvm(u_eff, w_eff, Y)[0]
            elif self.objective == "nll":
                log_z = chain_crf.batch_forward_backward(u_eff, w_eff)[2]
                loss = log_z - chain_crf.batch_score(u_eff, w_eff, Y)
            else:
                sweeps = self.mf_sweeps if self.objective == "ce_meanfield" else None
                if sweeps is None:
                    alpha, beta, log_z = chain_crf.batch_forward_backward(u_eff, w_eff)
                    log_p = alpha + beta - log_z[:, None, None]
                else:
                    log_p = chain_crf._mean_field_sweeps(u_eff, w_eff, sweeps)[1]
                loss = -np.take_along_axis(log_p, Y[:, :, None], axis=2)[:, :, 0].mean(axis=1)
            total += loss.sum() + pen.sum()
        return total / batch.size

    def predict(self, batch, scaling, decoder=None):
        """Objective-matched decoding: marginal argmax for CE, MAP otherwise."""
        decoder = decoder or ("marginal" if self.objective.startswith("ce") else "map")
        out = []
        for _, X, _ in batch.groups:
            U, _ = self._unaries(X)
            u_eff, w_eff, _, _ = chain_transform(scaling, U, self.pairwise)
            if decoder == "map":
                out.append(chain_crf.batch_viterbi(u_eff, w_eff))
            else:
                sweeps = self.mf_sweeps if self.objective == "ce_meanfield" else None
                out.append(chain_crf.batch_marginal_argmax(u_eff, w_eff, sweeps))
        return batch.scatter(out)

    def unary_predict(self, batch):
        return batch.scatter([self._unaries(X)[0].argmax(axis=2) for _, X, _ in batch.groups])

    def ratio(self, batch, scaling):
        """Mean per-instance ||U_eff|| / ||W_eff||."""
        ratios = []
        for _, X, _ in batch.groups:
            U, _ = self._unaries(X)
            u_eff, w_eff, _, _ = chain_transform(scaling, U, self.pairwise)
            nw = np.abs(w_eff).mean()
            nu = np.abs(u_eff).mean(axis=(1, 2))
            ratios.append(nu / nw if nw > 0 else np.full_like(nu, math.inf))
        return float(np.mean(np.concatenate(ratios)))

    def copy(self):
        return ChainModel(self.unary_net.copy(), self.pairwise.copy(), self.objective,
                          self.mf_sweeps)

    def to_record(self):
        return {"kind": self.kind, "objective": self.objective, "mf_sweeps": self.mf_sweeps,
                "unary_net": neural.to_record(self.unary_net),
                "pairwise": self.pairwise.tolist()}

    @classmethod
    def from_record(cls, rec):
        return cls(neural.from_record(rec["unary_net"]), np.array(rec["pairwise"]),
                   rec["objective"], rec["mf_sweeps"])


class SegModel:
    """Binary GCRF: MLP unaries and bounded MLP embeddings per pixel.

    Embeddings are ``bound * tanh(net(x)) / sqrt(L d)`` so that
    ``||A||_F^2 < bound^2 < lam`` and ``W + lam I`` stays positive definite.
    Only the ``none`` and ``online`` scaling modes are supported; the others
    rescale ``W`` and would break that guarantee.
    """

    kind = "seg"
    objective = "ce_gcrf"

    def __init__(self, unary_net, embed_net, lam=gcrf.DEFAULT_LAMBDA, bound_frac=0.9,
                 cg_tol=DEFAULT_CG_TOL):
        if embed_net.layers[-1].activation != "tanh":
            raise ValueError("embedding net must end in tanh")
        if unary_net.output_dim != 2:
            raise ValueError("segmentation unary net must output 2 scores")
        self.unary_net = unary_net
        self.embed_net = embed_net
        self.lam = lam
        self.bound_frac = bound_frac
        self.cg_tol = cg_tol
        self.max_residual = 0.0

    @classmethod
    def build(cls, n_features, hidden, embed_dim, seed, final_activation="relu", lam=1.0,
              bound_frac=0.9, cg_tol=DEFAULT_CG_TOL):
        sizes = [n_features, *hidden, 2]
        unary = neural.init_params(sizes, ["relu"] * len(hidden) + [final_activation], seed)
        esizes = [n_features, *hidden, embed_dim]
        embed = neural.init_params(esizes, ["relu"] * len(hidden) + ["tanh"], seed + 104729)
        return cls(unary, embed, lam, bound_frac, cg_tol)

    def params(self):
        return ([p for p in self.unary_net.params() if p is not None]
                + [p for p in self.embed_net.params() if p is not None])

    @property
    def unary_idx(self):
        return list(range(sum(p is not None for p in self.unary_net.params())))

    @property
    def pairwise_idx(self):
        n = len(self.unary_idx)
        return list(range(n, len(self.params())))

    def _check_scaling(self, scaling):
        if scaling.mode not in ("none", "online"):
            raise ValueError(f"GCRF training supports scaling modes none/online, not {scaling.mode!r}")

    def _potentials(self, X):
        B, L, F = X.shape
        u_out, tu = neural.forward(self.unary_net, X.reshape(B * L, F))
        u_out = u_out.reshape(B, L, 2)
        U = np.concatenate([u_out[..., 0], u_out[..., 1]], axis=1)
        z, te = neural.forward(self.embed_net, X.reshape(B * L, F))
        d = z.shape[-1]
        c = math.sqrt(self.bound_frac * self.lam) / math.sqrt(L * d)
        A = c * z.reshape(B, L, d)
        return U, A, tu, te, c

    def _solve(self, A, U):
        s, res, _ = gcrf.batch_solve(A, U, self.lam, self.cg_tol)
        self.max_residual = max(self.max_residual, res)
        return s

    def loss_and_grads(self, batch, scaling):
        self._check_scaling(scaling)
        a = scaling.alpha
        n = batch.size
        grads = _zeros_like(self.params())
        nu = len(self.unary_idx)
        total = 0.0
        for _, X, Y in batch.groups:
            B, L, _ = X.shape
            U, A, tu, te, c = self._potentials(X)
            s = self._solve(A, a * U)
            loss, g_s = gcrf.batch_ce(s, Y)
            total += loss.sum()
            g_u, g_a = gcrf.batch_backward(A, s, g_s / n, self.lam, self.cg_tol)
            g_u = a * g_u
            g_out = np.stack([g_u[:, :L], g_u[:, L:]], axis=-1).reshape(B * L, 2)
            ug, _ = neural.backward(self.unary_net, tu, g_out)
            eg, _ = neural.backward(self.embed_net, te, (c * g_a).reshape(B * L, -1))
            for k, g in enumerate(g for g in ug + eg if g is not None):
                grads[k] += g
        assert len(grads) == nu + len(self.pairwise_idx)
        return total / n, grads

    def unary_loss_and_grads(self, batch):
        n = batch.size
        grads = _zeros_like(self.params())
        total = 0.0
        for _, X, Y in batch.groups:
            B, L, F = X.shape
            out, tu = neural.forward(self.unary_net, X.reshape(B * L, F))
            log_p = log_softmax(out, axis=1)
            yf = Y.reshape(-1)
            total += -log_p[np.arange(B * L), yf].sum() / L
            g = (np.exp(log_p) - np.eye(2)[yf]) / (L * n)
            ug, _ = neural.backward(self.unary_net, tu, g)
            for k, gg in enumerate(x for x in ug if x is not None):
                grads[k] += gg
        return total / n, grads

    def scores(self, X):
        U, A, _, _, _ = self._potentials(X)
        return self._solve(A, U), U, A

    def eval_loss(self, batch, scaling):
        self._check_scaling(scaling)
        total = 0.0
        for _, X, Y in batch.groups:
            s, _, _ = self.scores(X)
            # the solve is linear in U, so scaling U by alpha scales s* by alpha
            total += gcrf.batch_ce(scaling.alpha * s, Y)[0].sum()
        return total / batch.size

    def grid_losses(self, batch, grid):
        """Loss at every grid alpha from a single solve per instance."""
        solved = [(self.scores(X)[0], Y) for _, X, Y in batch.groups]
        return [sum(gcrf.batch_ce(a * s, Y)[0].sum() for s, Y in solved) / batch.size
                for a in grid]

    def predict(self, batch, scaling, decoder=None):
        # argmax is invariant to the positive unary scale
        return batch.scatter([gcrf.batch_predict(self.scores(X)[0]) for _, X, _ in batch.groups])

    def unary_predict(self, batch):
        out = []
        for _, X, _ in batch.groups:
            B, L, F = X.shape
            u, _ = neural.forward(self.unary_net, X.reshape(B * L, F))
            out.append((u[:, 1] > u[:, 0]).astype(np.int64).reshape(B, L))
        return batch.scatter(out)

    def ratio(self, batch, scaling):
        ratios = []
        for _, X, _ in batch.groups:
            U, A, _, _, _ = self._potentials(X)
            bb = np.einsum("bld,bmd->blm", A, A)
            nw = np.abs(bb).mean(axis=(1, 2)) / 2.0
            nu = scaling.alpha * np.abs(U).mean(axis=1)
            ratios.append(np.where(nw > 0, nu / np.where(nw > 0, nw, 1.0), math.inf))
        return float(np.mean(np.concatenate(ratios)))

    def copy(self):
        return SegModel(self.unary_net.copy(), self.embed_net.copy(), self.lam,
                        self.bound_frac, self.cg_tol)

    def to_record(self):
        return {"kind": self.kind, "lam": self.lam, "bound_frac": self.bound_frac,
                "cg_tol": self.cg_tol, "unary_net": neural.to_record(self.unary_net),
                "embed_net": neural.to_record(self.embed_net)}

    @classmethod
    def from_record(cls, rec):
        return cls(neural.from_record(rec["unary_net"]), neural.from_record(rec["embed_net"]),
                   rec["lam"], rec["bound_frac"], rec["cg_tol"])


def save_checkpoint(path, model, scaling, extra=None):
    """JSON checkpoint: model parameters, scaling state and free-form extras."""
    rec = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.to_record(),
        "scaling": {"mode": scaling.mode, "alpha": scaling.alpha, "grid": scaling.grid,
                    "reg_lambda": scaling.reg_lambda, "reg_alpha": scaling.reg_alpha},
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(rec, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(model, scaling, extra)``."""
    with open(path) as fh:
        rec = json.load(fh)
    if rec.get("format") != CHECKPOINT_FORMAT or rec.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} model checkpoint")
    m = rec["model"]
    model = SegModel.from_record(m) if m["kind"] == "seg" else ChainModel.from_record(m)
    return model, ScalingState(**rec["scaling"]), rec["extra"]
