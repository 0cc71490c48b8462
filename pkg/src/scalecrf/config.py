"""Run configuration: an INI file read with :mod:`configparser`.

Sections and keys (all optional unless noted)::

    [run]        task (required: synth_seq | synth_seg | ocr), name, seeds ("0..7" or "0,3,5")
    [data]       seed, n, length_min, length_max, n_labels, n_features, snr,
                 transition_strength, height, width, smoothness, window_radius,
                 feature_scale, val_folds, test_folds, n_folds, path
    [model]      hidden ("32" or "64,32"), final_activation, final_bias, pairwise_init,
                 mf_sweeps, embed_dim, lam, cg_tol
    [train]      objective, schedule, batch_size, epochs, lr, plateau_patience,
                 stop_patience, plateau_factor, threshold, grid_subset, probe_size
    [optimizer]  kind (adam | sgd_momentum), momentum
    [scaling]    mode, alpha, grid ("-8..8" for powers of two, or a value list),
                 reg_lambda, reg_alpha
    [stage]      lr, epochs, plateau_patience, stop_patience; each either one value
                 or three comma-separated values (unary, pairwise, joint phase)

``feature_scale`` multiplies every input feature after loading; it is how the
mis-scaled experiments are set up.
"""

import configparser
import math
import os
from dataclasses import dataclass, field, replace

from .neural import ACTIVATIONS
from .scaling import MODES, ScalingState, default_grid
from .training import TASK_PATIENCE, PhaseConfig, TrainConfig

TASKS = ("synth_seq", "synth_seg", "ocr")
OBJECTIVES = ("nll", "ce_exact", "ce_meanfield", "ssvm")
RUNS_ENV = "SCALECRF_RUNS"

class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def parse_seeds(text):
    """``"0..7"`` -> [0..7]; ``"1,4,9"`` -> [1, 4, 9]."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def parse_grid(text):
    """``"-8..8"`` -> powers of two; otherwise a comma list of positive floats."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return [2.0 ** t for t in range(int(lo), int(hi) + 1)]
        grid = sorted(float(a) for a in text.split(",") if a.strip())
    except ValueError as exc:
        raise ConfigError(f"bad alpha grid {text!r}") from exc
    if not grid or not all(math.isfinite(a) and a > 0 for a in grid):
        raise ConfigError(f"alpha grid must be a nonempty list of positive values: {text!r}")
    return grid


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


@dataclass
class DataConfig:
    seed: int = 1234
    n: int = 600
    length_min: int = 6
    length_max: int = 10
    n_labels: int = 5
    n_features: int = 5
    snr: float = 1.0
    transition_strength: float = 3.0
    height: int = 16
    width: int = 16
    smoothness: float | None = None
    window_radius: int = 1
    feature_scale: float = 1.0
    n_folds: int = 10
    val_folds: list = field(default_factory=lambda: [0])
    test_folds: list = field(default_factory=lambda: [1, 2])
    path: str = ""


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [32])
    final_activation: str = "identity"
    final_bias: bool = True
    pairwise_init: float = 0.1
    mf_sweeps: int = 10
    embed_dim: int = 4
    lam: float = 1.0
    cg_tol: float = 1e-10


@dataclass
class RunConfig:
    task: str
    name: str = "run"
    seeds: list = field(default_factory=lambda: [0])
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    source: str = ""

    def with_seed(self, seed):
        return replace(self, train=replace(self.train, seed=seed))

    def with_scaling(self, scaling):
        return replace(self, train=replace(self.train, scaling=scaling))

    def with_schedule(self, schedule):
        return replace(self, train=replace(self.train, schedule=schedule))


def _get(sec, key, conv, default):
    if sec is None or key not in sec or str(sec[key]).strip() == "":
        return default
    try:
        return conv(sec[key])
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key}: {exc}") from exc


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _three(values, what):
    if len(values) == 1:
        return values * 3
    if len(values) != 3:
        raise ConfigError(f"[stage] {what}: give one value or three")
    return values


def default_patience(task):
    """(plateau, stop) patience; the synthetic sequence task stands in for OCR."""
    if task == "synth_seg":
        return TASK_PATIENCE["segmentation"]
    return TASK_PATIENCE["ocr"]


def load_config(path):
    """Parse and validate an INI run config; relative ``data.path`` resolves
    against the config's directory."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = {"run", "data", "model", "train", "optimizer", "scaling", "stage"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    return from_parser(cp, base_dir=os.path.dirname(os.path.abspath(path)), source=path)


def from_parser(cp, base_dir=".", source=""):
    sec = {name: (cp[name] if cp.has_section(name) else None)
           for name in ("run", "data", "model", "train", "optimizer", "scaling", "stage")}
    task = _get(sec["run"], "task", str, None)
    if task not in TASKS:
        raise ConfigError(f"[run] task must be one of {TASKS}, got {task!r}")

    d = DataConfig()
    s = sec["data"]
    data = DataConfig(
        seed=_get(s, "seed", int, d.seed),
        n=_get(s, "n", int, d.n),
        length_min=_get(s, "length_min", int, d.length_min),
        length_max=_get(s, "length_max", int, d.length_max),
        n_labels=_get(s, "n_labels", int, d.n_labels),
        n_features=_get(s, "n_features", int, d.n_features),
        snr=_get(s, "snr", float, d.snr),
        transition_strength=_get(s, "transition_strength", float, d.transition_strength),
        height=_get(s, "height", int, d.height),
        width=_get(s, "width", int, d.width),
        smoothness=_get(s, "smoothness", float, d.smoothness),
        window_radius=_get(s, "window_radius", int, d.window_radius),
        feature_scale=_get(s, "feature_scale", float, d.feature_scale),
        n_folds=_get(s, "n_folds", int, 5 if task == "synth_seg" else d.n_folds),
        val_folds=_get(s, "val_folds", _ints, d.val_folds),
        test_folds=_get(s, "test_folds", _ints, d.test_folds),
        path=_get(s, "path", str, d.path),
    )
    if data.path and not os.path.isabs(data.path):
        data.path = os.path.normpath(os.path.join(base_dir, data.path))
    if task == "ocr" and not data.path:
        raise ConfigError("[data] path is required for the ocr task")
    if data.path and not os.path.exists(data.path):
        raise ConfigError(f"[data] path does not exist: {data.path}")
    if not data.feature_scale > 0:
        raise ConfigError("[data] feature_scale must be positive")
    if set(data.val_folds) & set(data.test_folds):
        raise ConfigError("[data] val_folds and test_folds overlap")

    m = ModelConfig()
    s = sec["model"]
    model = ModelConfig(
        hidden=_get(s, "hidden", _ints, m.hidden),
        final_activation=_get(s, "final_activation", str, m.final_activation),
        final_bias=_get(s, "final_bias", _bool, m.final_bias),
        pairwise_init=_get(s, "pairwise_init", float, m.pairwise_init),
        mf_sweeps=_get(s, "mf_sweeps", int, m.mf_sweeps),
        embed_dim=_get(s, "embed_dim", int, m.embed_dim),
        lam=_get(s, "lam", float, m.lam),
        cg_tol=_get(s, "cg_tol", float, m.cg_tol),
    )
    if model.final_activation not in ACTIVATIONS:
        raise ConfigError(f"[model] final_activation must be one of {ACTIVATIONS}")
    if not model.lam > 0:
        raise ConfigError("[model] lam must be positive")

    s = sec["scaling"]
    mode = _get(s, "mode", str, "none")
    if mode not in MODES:
        raise ConfigError(f"[scaling] mode must be one of {MODES}")
    try:
        scaling = ScalingState(
            mode=mode,
            alpha=_get(s, "alpha", float, 1.0),
            grid=_get(s, "grid", parse_grid, default_grid()),
            reg_lambda=_get(s, "reg_lambda", float, 0.0),
            reg_alpha=_get(s, "reg_alpha", float, 1.0),
        )
    except ValueError as exc:
        raise ConfigError(f"[scaling] {exc}") from exc
    if task == "synth_seg" and mode not in ("none", "online"):
        raise ConfigError("the GCRF task supports scaling modes none and online only")

    pp, sp = default_patience(task)
    s = sec["train"]
    joint = PhaseConfig(
        lr=_get(s, "lr", float, 1e-2),
        epochs=_get(s, "epochs", int, 30),
        plateau_patience=_get(s, "plateau_patience", int, pp),
        stop_patience=_get(s, "stop_patience", int, sp),
    )
    s = sec["stage"]
    lrs = _three(_get(s, "lr", _floats, [joint.lr]), "lr")
    eps = _three(_get(s, "epochs", _ints, [joint.epochs]), "epochs")
    pps = _three(_get(s, "plateau_patience", _ints, [joint.plateau_patience]), "plateau_patience")
    sps = _three(_get(s, "stop_patience", _ints, [joint.stop_patience]), "stop_patience")
    stages = tuple(PhaseConfig(lr, ep, p, q) for lr, ep, p, q in zip(lrs, eps, pps, sps))

    s = sec["train"]
    objective = _get(s, "objective", str, "ce_exact")
    if task == "synth_seg":
        objective = "ce_gcrf"
    elif objective not in OBJECTIVES:
        raise ConfigError(f"[train] objective must be one of {OBJECTIVES}")
    o = sec["optimizer"]
    try:
        train = TrainConfig(
            objective=objective,
            schedule=_get(s, "schedule", str, "joint"),
            optimizer=_get(o, "kind", str, "adam"),
            momentum=_get(o, "momentum", float, 0.9),
            batch_size=_get(s, "batch_size", int, 20),
            plateau_factor=_get(s, "plateau_factor", float, 0.1),
            threshold=_get(s, "threshold", float, 1e-3),
            joint=joint,
            stages=stages,
            scaling=scaling,
            grid_subset=_get(s, "grid_subset", int, 0),
            probe_size=_get(s, "probe_size", int, 64),
        )
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc
    if train.optimizer not in ("adam", "sgd_momentum"):
        raise ConfigError("[optimizer] kind must be adam or sgd_momentum")

    r = sec["run"]
    return RunConfig(
        task=task,
        name=_get(r, "name", str, os.path.splitext(os.path.basename(source))[0] or "run"),
        seeds=_get(r, "seeds", parse_seeds, [0]),
        data=data, model=model, train=train, source=source,
    )


def runs_root():
    """Directory for run outputs: ``$SCALECRF_RUNS`` or ``./runs``."""
    return os.environ.get(RUNS_ENV) or os.path.join(os.getcwd(), "runs")
