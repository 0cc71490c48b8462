"""Optimizers, plateau schedule, early stopping and the training loops.

Joint training runs one optimizer over every parameter; with online scaling
the unary scale alpha is re-picked on a fixed training subset after each
epoch.  Stage training runs unary-only, pairwise-only and joint phases.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import chain_crf, neural
from .numerics import make_rng
from .scaling import ScalingState, evaluate_grid

log = logging.getLogger(__name__)

# per-task Plateau/stop patience: (reduce-LR patience, stop patience)
TASK_PATIENCE = {"ocr": (3, 7), "chunking": (1, 3), "segmentation": (5, 13)}


class TrainingDiverged(FloatingPointError):
    """Non-finite gradient; the parameters are left at their last finite values."""


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def _check_grads(params, grads, names):
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"param[{i}]"
            raise TrainingDiverged(f"non-finite gradient in {name}")


def sgd_step(params, grads, state, lr_scale=None, names=None):
    """``v <- mu v + g; p <- p - lr v`` in place."""
    _check_grads(params, grads, names)
    for i, (p, g) in enumerate(zip(params, grads)):
        v = state.buffers.get(i)
        v = g.copy() if v is None else state.momentum * v + g
        state.buffers[i] = v
        p -= state.lr * (1.0 if lr_scale is None else lr_scale[i]) * v
    state.step_count += 1
    return params, state


def adam_step(params, grads, state, lr_scale=None, names=None):
    """Bias-corrected Adam update in place."""
    _check_grads(params, grads, names)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.buffers.get(i, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.buffers[i] = (m, v)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= state.lr * (1.0 if lr_scale is None else lr_scale[i]) * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def optimizer_step(params, grads, state, lr_scale=None, names=None):
    step = adam_step if state.kind == "adam" else sgd_step
    return step(params, grads, state, lr_scale, names)


# ---------------------------------------------------------------------------
# plateau schedule and early stopping
# ---------------------------------------------------------------------------


def _improved(metric, best, threshold):
    return metric > best + threshold


def plateau_scheduler(history, patience, factor=0.1, threshold=1e-3):
    """Replay ``history`` (index 0 = metric before training, higher is better).

    Returns the LR multiplier to apply at the last epoch: ``factor`` when
    ``patience`` consecutive epochs failed to beat the best metric by
    ``threshold``, else 1.0.  The counter resets after each reduction.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not 0 < factor < 1:
        raise ValueError("factor must be in (0, 1)")
    if len(history) < 2:
        return 1.0
    best, bad, reduce_now = history[0], 0, False
    for m in history[1:]:
        reduce_now = False
        if _improved(m, best, threshold):
            best, bad = m, 0
        else:
            bad += 1
            if bad >= patience:
                reduce_now, bad = True, 0
    return factor if reduce_now else 1.0


def early_stop(history, patience, threshold=1e-3):
    """True once ``patience`` consecutive epochs brought no improvement."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best, bad = history[0], 0
    for m in history[1:]:
        if _improved(m, best, threshold):
            best, bad = m, 0
        else:
            bad += 1
    return bad >= patience


# ---------------------------------------------------------------------------
# configuration and telemetry
# ---------------------------------------------------------------------------


@dataclass
class PhaseConfig:
    """Learning rate and stopping for one optimization phase."""

    lr: float = 1e-2
    epochs: int = 30
    plateau_patience: int = 3
    stop_patience: int = 7


@dataclass
class TrainConfig:
    objective: str = "ce_exact"
    schedule: str = "joint"  # joint | stage
    optimizer: str = "adam"
    momentum: float = 0.9
    batch_size: int = 20
    plateau_factor: float = 0.1
    threshold: float = 1e-3
    seed: int = 0
    joint: PhaseConfig = field(default_factory=PhaseConfig)
    stages: tuple = field(default_factory=lambda: (PhaseConfig(), PhaseConfig(), PhaseConfig()))
    scaling: ScalingState = field(default_factory=ScalingState)
    grid_subset: int = 0  # 0 -> a third of the training set
    probe_size: int = 64

    def __post_init__(self):
        if self.schedule not in ("joint", "stage"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau factor must be in (0, 1)")
        for ph in (self.joint, *self.stages):
            if ph.plateau_patience < 1 or ph.stop_patience < 1:
                raise ValueError("patience values must be positive")
        if len(self.stages) != 3:
            raise ValueError("stage schedule needs three phases")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    ratio: float
    alpha: float
    lr: float
    seconds: float
    stage: int = 0
    stage_start: bool = False


@dataclass
class TrainTelemetry:
    records: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""

    def append(self, rec):
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epochs must be consecutive")
        self.records.append(rec)

    @property
    def stage_markers(self):
        return [r.epoch for r in self.records if r.stage_start]


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def task_metric(model, ds, batch, scaling, unary_only=False):
    from .data import metric_accuracy, metric_iou

    preds = model.unary_predict(batch) if unary_only else model.predict(batch, scaling)
    golds = [ds.labels[i] for i in sorted(i for g in batch.groups for i in g[0])]
    return metric_iou(preds, golds) if model.kind == "seg" else metric_accuracy(preds, golds)


@dataclass
class TrainData:
    train: object
    val: object
    grid_index: list
    probe_index: list

    @classmethod
    def make(cls, train, val, seed, grid_subset=0, probe_size=64):
        from .models import Batch

        rng = make_rng(seed + 15485863)
        n = len(train)
        k = grid_subset or max(1, n // 3)
        grid_index = sorted(rng.choice(n, size=min(k, n), replace=False).tolist())
        probe_index = sorted(rng.choice(n, size=min(probe_size, n), replace=False).tolist())
        data = cls(train, val, grid_index, probe_index)
        data.val_batch = Batch.of(val)
        data.grid_batch = Batch.of(train, grid_index)
        data.probe_batch = Batch.of(train, probe_index)
        return data


def _grid_search(model, data, scaling):
    grid = scaling.grid
    if hasattr(model, "grid_losses"):
        losses = model.grid_losses(data.grid_batch, grid)
    else:
        losses = evaluate_grid(
            lambda a: model.eval_loss(data.grid_batch, replace(scaling, alpha=a)), grid)
    best, best_loss = None, math.inf
    for a, l in zip(grid, losses):
        if math.isfinite(l) and (best is None or l < best_loss):
            best, best_loss = a, l
    if best is None:
        raise TrainingDiverged("grid-search loss non-finite at every alpha")
    return best, losses


def _run_phase(model, data, cfg, phase, scaling, telemetry, stage=0, trainable=None,
               unary_only=False, callback=None, rng=None):
    """One optimization phase; appends to ``telemetry``.  Returns the scaling state."""
    from .models import minibatches

    params = model.params()
    idx = list(range(len(params))) if trainable is None else list(trainable)
    opt = OptimizerState(kind=cfg.optimizer, lr=phase.lr, momentum=cfg.momentum)
    history = [task_metric(model, data.val, data.val_batch, scaling, unary_only)]
    first = True
    for _ in range(phase.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch in minibatches(data.train, cfg.batch_size, rng):
            if unary_only:
                loss, grads = model.unary_loss_and_grads(batch)
            else:
                loss, grads = model.loss_and_grads(batch, scaling)
            if not math.isfinite(loss):
                raise TrainingDiverged("non-finite training loss")
            optimizer_step([params[i] for i in idx], [grads[i] for i in idx], opt,
                           names=[f"param[{i}]" for i in idx])
            total += loss * batch.size
            count += batch.size
        if callback is not None:
            callback(model, scaling, len(telemetry.records) + 1)
        if scaling.mode == "online" and not unary_only:
            best, _ = _grid_search(model, data, scaling)
            scaling = replace(scaling, alpha=best)
        metric = task_metric(model, data.val, data.val_batch, scaling, unary_only)
        history.append(metric)
        rec = EpochRecord(
            epoch=len(telemetry.records) + 1, train_loss=float(total / count), val_metric=metric,
            ratio=model.ratio(data.probe_batch, scaling), alpha=scaling.alpha, lr=opt.lr,
            seconds=time.perf_counter() - t0, stage=stage, stage_start=first and stage > 1)
        first = False
        telemetry.append(rec)
        log.debug("epoch %d loss %.4f metric %.4f ratio %.3g alpha %g", rec.epoch,
                  rec.train_loss, metric, rec.ratio, rec.alpha)
        if early_stop(history, phase.stop_patience, cfg.threshold):
            break
        opt.lr *= plateau_scheduler(history, phase.plateau_patience, cfg.plateau_factor,
                                    cfg.threshold)
    return scaling


def train_joint(model, data, cfg, callback=None):
    """Joint training (optionally with a scaling mode); returns (model, telemetry, scaling).

    ``callback(model, scaling, epoch)`` fires after each optimizer pass,
    before the online alpha update.
    """
    telemetry = TrainTelemetry()
    scaling = cfg.scaling
    if scaling.mode == "online":
        scaling = replace(scaling, alpha=1.0)
    rng = make_rng(cfg.seed)
    try:
        scaling = _run_phase(model, data, cfg, cfg.joint, scaling, telemetry,
                             callback=callback, rng=rng)
    except TrainingDiverged as exc:
        telemetry.diverged, telemetry.message = True, str(exc)
    return model, telemetry, scaling


def train_unary(model, data, cfg, phase=None):
    """Unary predictor alone (per-position CE); the first stage and a baseline."""
    telemetry = TrainTelemetry()
    rng = make_rng(cfg.seed)
    try:
        _run_phase(model, data, cfg, phase or cfg.stages[0], ScalingState(), telemetry,
                   stage=1, trainable=model.unary_idx, unary_only=True, rng=rng)
    except TrainingDiverged as exc:
        telemetry.diverged, telemetry.message = True, str(exc)
    return model, telemetry


def train_stage(model, data, cfg, callback=None):
    """Unary-only, then pairwise-only with unaries frozen, then joint fine-tuning.

    ``callback`` has the same meaning as in :func:`train_joint`.
    """
    telemetry = TrainTelemetry()
    scaling = ScalingState()
    rng = make_rng(cfg.seed)
    phases = [
        dict(stage=1, trainable=model.unary_idx, unary_only=True),
        dict(stage=2, trainable=model.pairwise_idx),
        dict(stage=3, trainable=None),
    ]
    try:
        for phase, kw in zip(cfg.stages, phases):
            _run_phase(model, data, cfg, phase, scaling, telemetry, rng=rng,
                       callback=callback, **kw)
    except TrainingDiverged as exc:
        telemetry.diverged, telemetry.message = True, str(exc)
    return model, telemetry, scaling


def train(model, data, cfg, callback=None):
    if cfg.schedule == "stage":
        return train_stage(model, data, cfg, callback)
    return train_joint(model, data, cfg, callback)


# ---------------------------------------------------------------------------
# rescaling equivalence
# ---------------------------------------------------------------------------


def rescaling_equivalence_check(seed, alpha, eta, steps, optimizer="sgd", n_seq=6,
                                length=5, n_features=6, n_labels=3, hidden=8):
    """Compare unary scaling against the init/learning-rate reparameterization.

    Run A scales the unaries of a bias-free final linear layer ``V`` by
    ``alpha``.  Run B drops the scale, starts from ``alpha * V0`` and uses
    learning rate ``alpha**2 * eta`` for ``V`` only.  Both minimise the exact
    chain-CRF CE loss with full-batch steps.

    Returns ``(max |V_B - alpha V_A|, max deviation of all other parameters)``
    over the trajectory.
    """
    rng = make_rng(seed)
    X = rng.normal(size=(n_seq, length, n_features))
    Y = rng.integers(0, n_labels, size=(n_seq, length))
    net0 = neural.init_params([n_features, hidden, n_labels], ["relu", "identity"], seed,
                              final_bias=False)
    W0 = rng.normal(scale=0.1, size=(n_labels, n_labels))

    def make_run(scale_v, unary_scale, v_lr):
        net = net0.copy()
        net.layers[-1].weight *= scale_v
        W = W0.copy()
        params = [p for p in net.params() if p is not None] + [W]
        lr_scale = [1.0] * len(params)
        lr_scale[len(params) - 2] = v_lr  # final-layer weight V
        return net, W, params, lr_scale, unary_scale

    runs = [make_run(1.0, alpha, 1.0), make_run(alpha, 1.0, alpha ** 2)]
    states = [OptimizerState(kind="adam" if optimizer == "adam" else "sgd_momentum",
                             lr=eta, momentum=0.0) for _ in runs]
    dev_v = dev_other = 0.0
    for _ in range(steps):
        for (net, W, params, lr_scale, a), st in zip(runs, states):
            out, tape = neural.forward(net, X.reshape(-1, n_features))
            U = a * out.reshape(n_seq, length, n_labels)
            loss, gU, gW = chain_crf.batch_loss_ce(U, W, Y)
            grads, _ = neural.backward(net, tape, (a * gU / n_seq).reshape(-1, n_labels))
            grads = [g for g in grads if g is not None] + [gW / n_seq]
            optimizer_step(params, grads, st, lr_scale)
        pa, pb = runs[0][2], runs[1][2]
        dev_v = max(dev_v, float(np.max(np.abs(pb[-2] - alpha * pa[-2]))))
        others = [np.max(np.abs(x - y)) for k, (x, y) in enumerate(zip(pa, pb))
                  if k != len(pa) - 2]
        dev_other = max(dev_other, float(max(others)))
    return dev_v, dev_other
