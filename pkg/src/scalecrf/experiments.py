"""Experiment runner behind the CLI: datasets from configs, per-seed training,
telemetry/summary files and the alpha sweep.

Output layout for ``run_train(cfg, out)``::

    out/summary.json
    out/data.npz                  raw dataset (before feature scaling/windowing)
    out/seed_<s>/telemetry.csv    epoch,train_loss,val_metric,ratio,alpha,lr,seconds
    out/seed_<s>/model.json       checkpoint incl. scaling state and preprocessing
"""

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, replace

import numpy as np

from . import data as data_mod
from .models import Batch, ChainModel, SegModel, load_checkpoint, save_checkpoint
from .scaling import ScalingState
from .training import TrainData, task_metric, train, train_unary

log = logging.getLogger(__name__)

TELEMETRY_HEADER = ("epoch", "train_loss", "val_metric", "ratio", "alpha", "lr", "seconds")
SWEEP_HEADER = ("row", "alpha", "mean", "std", "val_mean", "n_seeds", "n_failed")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def generator_args(cfg):
    """Keyword arguments of the synthetic generator named by ``cfg.task``."""
    d = cfg.data
    if cfg.task == "synth_seq":
        return dict(seed=d.seed, n=d.n, length_range=(d.length_min, d.length_max),
                    n_labels=d.n_labels, n_features=d.n_features, unary_snr=d.snr,
                    transition_strength=d.transition_strength, n_folds=d.n_folds)
    if cfg.task == "synth_seg":
        return dict(seed=d.seed, n=d.n, height=d.height, width=d.width,
                    n_features=d.n_features, snr=d.snr, smoothness=d.smoothness,
                    n_folds=d.n_folds)
    raise ValueError(f"task {cfg.task!r} has no generator")


def generate(kind, **kwargs):
    if kind == "synth_seq":
        return data_mod.synth_sequences(**kwargs)
    if kind == "synth_seg":
        return data_mod.synth_segmentation(**kwargs)
    raise ValueError(f"unknown generator {kind!r}")


def cached_generate(kind, kwargs, cache_dir=None):
    """Generator output, memoized on disk under a key of (kind, args)."""
    if not cache_dir:
        return generate(kind, **kwargs)
    key = hashlib.sha256(json.dumps([kind, kwargs], sort_keys=True, default=list)
                         .encode()).hexdigest()[:16]
    path = os.path.join(cache_dir, f"{kind}-{key}.npz")
    if os.path.exists(path):
        return data_mod.load_dataset(path)
    ds = generate(kind, **kwargs)
    os.makedirs(cache_dir, exist_ok=True)
    data_mod.save_dataset(ds, path)
    return ds


def load_raw(cfg, cache_dir=None):
    """The dataset named by the config, before preprocessing."""
    if cfg.data.path:
        if cfg.data.path.endswith(".npz"):
            return data_mod.load_dataset(cfg.data.path)
        ds = data_mod.load_taskar_ocr(cfg.data.path)
        return ds
    return cached_generate(cfg.task, generator_args(cfg), cache_dir)


def preprocessing(cfg):
    return {"feature_scale": cfg.data.feature_scale,
            "window_radius": cfg.data.window_radius if cfg.task == "synth_seg" else 0,
            "val_folds": list(cfg.data.val_folds), "test_folds": list(cfg.data.test_folds)}


def preprocess(ds, prep):
    """Windowing (segmentation only) then feature scaling."""
    if prep.get("window_radius"):
        ds = data_mod.window_features(ds, prep["window_radius"])
    scale = prep.get("feature_scale", 1.0)
    if scale != 1.0:
        ds = replace(ds, features=[scale * x for x in ds.features])
    return ds


def prepare(cfg, cache_dir=None):
    """``(raw, train, val, test)`` for a config."""
    raw = load_raw(cfg, cache_dir)
    ds = preprocess(raw, preprocessing(cfg))
    train_ds, val_ds, test_ds = data_mod.split_folds(ds, cfg.data.val_folds, cfg.data.test_folds)
    return raw, train_ds, val_ds, test_ds


def select_split(ds, prep, split):
    if split == "all":
        return ds
    tr, va, te = data_mod.split_folds(ds, prep["val_folds"], prep["test_folds"])
    return {"train": tr, "val": va, "test": te}[split]


# ---------------------------------------------------------------------------
# models and single runs
# ---------------------------------------------------------------------------


def build_model(cfg, train_ds, seed):
    m = cfg.model
    if cfg.task == "synth_seg":
        return SegModel.build(train_ds.n_features, m.hidden, m.embed_dim, seed,
                              final_activation=m.final_activation, lam=m.lam, cg_tol=m.cg_tol)
    return ChainModel.build(train_ds.n_features, train_ds.n_labels, m.hidden, seed,
                            objective=cfg.train.objective,
                            final_activation=m.final_activation,
                            pairwise_init=m.pairwise_init, final_bias=m.final_bias,
                            mf_sweeps=m.mf_sweeps)


def run_seed(cfg, seed, splits, unary_only=False):
    """Train one seed; returns a dict with the model, telemetry and metrics.

    A diverged run keeps its last finite parameters and is still evaluated;
    it is flagged ``failed``.
    """
    _, train_ds, val_ds, test_ds = splits
    cfg = cfg.with_seed(seed)
    tc = cfg.train
    model = build_model(cfg, train_ds, seed)
    data = TrainData.make(train_ds, val_ds, seed, tc.grid_subset, tc.probe_size)
    t0 = time.perf_counter()
    if unary_only:
        model, tel = train_unary(model, data, tc)
        scaling = ScalingState()
    else:
        model, tel, scaling = train(model, data, tc)
    minutes = (time.perf_counter() - t0) / 60.0
    test_batch = Batch.of(test_ds)
    metric = task_metric(model, test_ds, test_batch, scaling, unary_only)
    if not math.isfinite(metric):
        metric = 0.0
    val_metric = tel.records[-1].val_metric if tel.records else float("nan")
    return {"seed": seed, "model": model, "scaling": scaling, "telemetry": tel,
            "metric": float(metric), "val_metric": float(val_metric),
            "failed": tel.diverged, "message": tel.message, "minutes": minutes}


def write_telemetry(path, telemetry):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TELEMETRY_HEADER)
        for r in telemetry.records:
            w.writerow([r.epoch, *(repr(float(v)) for v in
                                   (r.train_loss, r.val_metric, r.ratio, r.alpha, r.lr)),
                        f"{r.seconds:.3f}"])


def read_telemetry(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]


def summarize(values):
    """Mean and population standard deviation (0 for a single seed)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def run_train(cfg, out, seeds=None, cache_dir=None, unary_only=False):
    """Train every seed, write telemetry/checkpoints/summary; returns the summary."""
    seeds = list(seeds or cfg.seeds)
    os.makedirs(out, exist_ok=True)
    splits = prepare(cfg, cache_dir)
    data_mod.save_dataset(splits[0], os.path.join(out, "data.npz"))
    prep = preprocessing(cfg)
    t0 = time.perf_counter()
    per_seed = []
    for seed in seeds:
        res = run_seed(cfg, seed, splits, unary_only)
        sdir = os.path.join(out, f"seed_{seed}")
        os.makedirs(sdir, exist_ok=True)
        tel_path = os.path.join(sdir, "telemetry.csv")
        ckpt_path = os.path.join(sdir, "model.json")
        write_telemetry(tel_path, res["telemetry"])
        save_checkpoint(ckpt_path, res["model"], res["scaling"],
                        {"task": cfg.task, "preprocess": prep, "seed": seed,
                         "unary_only": unary_only})
        log.info("seed %d: metric %.4f%s", seed, res["metric"],
                 " (failed)" if res["failed"] else "")
        per_seed.append({
            "seed": seed, "metric": res["metric"], "val_metric": res["val_metric"],
            "failed": res["failed"], "message": res["message"],
            "epochs": len(res["telemetry"].records), "alpha": res["scaling"].alpha,
            "stage_markers": res["telemetry"].stage_markers,
            "minutes": res["minutes"],
            "telemetry": os.path.relpath(tel_path, out),
            "checkpoint": os.path.relpath(ckpt_path, out),
        })
    mean, std = summarize([r["metric"] for r in per_seed])
    summary = {
        "name": cfg.name, "task": cfg.task, "config": os.path.abspath(cfg.source) if cfg.source else "",
        "schedule": cfg.train.schedule, "scaling_mode": cfg.train.scaling.mode,
        "unary_only": unary_only,
        "metric": "iou" if cfg.task == "synth_seg" else "accuracy",
        "seeds": seeds, "per_seed": per_seed, "mean": mean, "std": std,
        "failed_seeds": [r["seed"] for r in per_seed if r["failed"]],
        "minutes": (time.perf_counter() - t0) / 60.0,
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def run_alpha_sweep(cfg, alphas, out, seeds=None, cache_dir=None, scale="unary"):
    """Fixed scale per alpha (joint training) plus unary-only and stage rows.

    ``scale="unary"`` multiplies the unary block only (mode none);
    ``scale="temperature"`` multiplies both blocks.  ``val_mean`` is the mean
    final validation metric, for picking an alpha without looking at test.
    Writes ``out/alpha_sweep.csv`` and returns its rows as dicts.
    """
    if scale not in ("unary", "temperature"):
        raise ValueError(f"scale must be unary or temperature, got {scale!r}")
    mode = "none" if scale == "unary" else "temperature"
    seeds = list(seeds or cfg.seeds)
    rows = []
    joint = cfg.with_schedule("joint")
    for a in alphas:
        c = joint.with_scaling(ScalingState(mode=mode, alpha=float(a)))
        s = run_train(c, os.path.join(out, f"alpha_{a:g}"), seeds, cache_dir)
        rows.append(("joint", float(a), s))
    s = run_train(joint.with_scaling(ScalingState()), os.path.join(out, "unary_only"), seeds,
                  cache_dir, unary_only=True)
    rows.append(("unary_only", "", s))
    s = run_train(cfg.with_schedule("stage").with_scaling(ScalingState()),
                  os.path.join(out, "stage"), seeds, cache_dir)
    rows.append(("stage", "", s))
    table = []
    for label, a, s in rows:
        val_mean, _ = summarize([r["val_metric"] for r in s["per_seed"]])
        table.append({"row": label, "alpha": a, "mean": s["mean"], "std": s["std"],
                      "val_mean": val_mean, "n_seeds": len(s["seeds"]), "n_failed": len(s["failed_seeds"])})
    with open(os.path.join(out, "alpha_sweep.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_HEADER, lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return table


def run_eval(ckpt, data_path, split="test", decoder=None):
    """Metric of a checkpoint on a dataset file (``.npz`` or Taskar OCR text).

    The checkpoint's preprocessing (feature scale, windowing, folds) and
    scaling state (e.g. the online alpha) are applied before decoding.
    """
    model, scaling, extra = load_checkpoint(ckpt)
    raw = (data_mod.load_dataset(data_path) if data_path.endswith(".npz")
           else data_mod.load_taskar_ocr(data_path))
    prep = extra.get("preprocess", {})
    ds = select_split(preprocess(raw, prep), prep or {"val_folds": [], "test_folds": []}, split)
    expected = model.unary_net.input_dim
    if ds.n_features != expected:
        raise ValueError(f"dataset has {ds.n_features} features, checkpoint expects {expected}")
    if model.kind == "chain" and ds.n_labels > model.n_labels:
        raise ValueError(f"dataset has {ds.n_labels} labels, checkpoint has {model.n_labels}")
    batch = Batch.of(ds)
    unary_only = bool(extra.get("unary_only"))
    if unary_only:
        preds = model.unary_predict(batch)
    else:
        preds = model.predict(batch, scaling, decoder)
    golds = list(ds.labels)
    if model.kind == "seg":
        return data_mod.metric_iou(preds, golds)
    return data_mod.metric_accuracy(preds, golds)


def summary_record(cfg):
    """JSON-friendly dump of a RunConfig (for logs and tests)."""
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=str))
