"""Command line entry point: ``scalecrf <verb> ...`` (or ``python -m scalecrf``).

Verbs: train, alpha-sweep, eval, gen-data, selftest.  Run outputs go under
``--out`` or ``$SCALECRF_RUNS/<run name>`` (default ``./runs/<run name>``).
"""

import argparse
import json
import logging
import os
import sys

from . import data as data_mod
from .config import ConfigError, load_config, parse_grid, parse_seeds, runs_root
from .experiments import generate, run_alpha_sweep, run_eval, run_train
from .selftest import run_selftest

GEN_DEFAULTS = {
    "synth_seq": dict(n=600, length_range=(6, 10), n_labels=5, n_features=5,
                      unary_snr=1.0, transition_strength=3.0),
    "synth_seg": dict(n=200, height=16, width=16, n_features=3, snr=1.0),
}


def _out_dir(args, cfg, suffix=""):
    if args.out:
        return args.out
    return os.path.join(runs_root(), cfg.name + suffix)


def cmd_train(args):
    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else cfg.seeds
    out = _out_dir(args, cfg)
    summary = run_train(cfg, out, seeds, cache_dir=args.cache, unary_only=args.unary_only)
    for r in summary["per_seed"]:
        flag = "  FAILED: " + r["message"] if r["failed"] else ""
        print(f"seed {r['seed']}: {summary['metric']} {r['metric']:.4f}{flag}")
    print(f"mean {summary['mean']:.4f} std {summary['std']:.4f} "
          f"({len(seeds)} seeds, {summary['minutes']:.2f} min) -> {out}")
    return 0


def cmd_alpha_sweep(args):
    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else cfg.seeds
    alphas = parse_grid(args.alphas)
    out = _out_dir(args, cfg, "_alpha_sweep")
    table = run_alpha_sweep(cfg, alphas, out, seeds, cache_dir=args.cache, scale=args.scale)
    for row in table:
        a = "" if row["alpha"] == "" else f"{row['alpha']:g}"
        print(f"{row['row']:>10} {a:>8} {row['mean']:.4f} +- {row['std']:.4f}"
              f"  (val {row['val_mean']:.4f})")
    print(f"-> {os.path.join(out, 'alpha_sweep.csv')}")
    return 0


def cmd_eval(args):
    metric = run_eval(args.ckpt, args.data, args.split, args.decoder)
    print(f"{metric!r}")
    return 0


def cmd_gen_data(args):
    kwargs = dict(GEN_DEFAULTS[args.kind])
    if args.n is not None:
        kwargs["n"] = args.n
    ds = generate(args.kind, seed=args.seed, **kwargs)
    data_mod.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} instances to {args.out}")
    return 0


def cmd_selftest(args):
    results = run_selftest(args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="scalecrf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train every seed of a config")
    t.add_argument("--config", required=True)
    t.add_argument("--seeds", help='override, e.g. "0..7" or "0,2"')
    t.add_argument("--out")
    t.add_argument("--cache", help="directory for cached synthetic datasets")
    t.add_argument("--unary-only", action="store_true",
                   help="train and evaluate the unary classifier alone")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("alpha-sweep", help="fixed unary scale per alpha, plus baselines")
    s.add_argument("--config", required=True)
    s.add_argument("--alphas", required=True, help='comma list, or "-4..4" for powers of two')
    s.add_argument("--seeds")
    s.add_argument("--out")
    s.add_argument("--cache")
    s.add_argument("--scale", choices=("unary", "temperature"), default="unary",
                   help="scale the unary block only, or both blocks")
    s.set_defaults(fn=cmd_alpha_sweep)

    e = sub.add_parser("eval", help="metric of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help=".npz dataset or Taskar letter.data")
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    e.add_argument("--decoder", choices=("marginal", "map"),
                   help="override the objective-matched decoder (chain models)")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--kind", required=True, choices=sorted(GEN_DEFAULTS))
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.set_defaults(fn=cmd_gen_data)

    st = sub.add_parser("selftest", help="run the built-in oracle checks")
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
