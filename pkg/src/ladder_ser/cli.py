"""Command-line entry point: ``ladder-ser {train,grid-search,evaluate,compare,synth}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

from ladder_ser.checkpoint import checkpoint_load, checkpoint_save
from ladder_ser.config import RunConfig, dump_config, load_config
from ladder_ser.data import (
    FRAME,
    SENTENCE,
    attach_labels,
    load_features,
    load_labels,
    save_features,
    save_labels,
    synth_generate,
)
from ladder_ser.errors import DivergenceError, LadderError
from ladder_ser.training import (
    compare,
    evaluate,
    grid_search_mtl,
    load_report,
    render_comparison,
    render_report,
    save_report,
    train,
)

log = logging.getLogger("ladder_ser")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None, metavar="VALUE")


def _config_from_args(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def _write_log(history, path) -> None:
    attrs = sorted({a for h in history for a in h["dev_ccc"]})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_cost", *[f"dev_ccc_{a}" for a in attrs]])
        for h in history:
            cost = "" if h["train_cost"] is None else repr(h["train_cost"])
            w.writerow([h["epoch"], cost, *[repr(h["dev_ccc"].get(a, float("nan"))) for a in attrs]])


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    log.info("configuration:\n%s", dump_config(cfg))
    try:
        result = train(cfg)
    except DivergenceError as exc:
        ckpt = getattr(exc, "checkpoint", None)
        if ckpt is not None:
            checkpoint_save(ckpt, args.out)
            log.error("training diverged; last good checkpoint written to %s", args.out)
        raise
    checkpoint_save(result.checkpoint, args.out)
    if args.log:
        _write_log(result.history, args.log)
    meta = result.checkpoint.meta
    print(f"best epoch {meta['best_epoch']}  dev CCC ({cfg.target}) {meta['best_dev_ccc']}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_grid_search(args) -> int:
    cfg = _config_from_args(args)
    best, scores = grid_search_mtl(cfg, grid_step=args.step)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "beta", "dev_ccc_arousal", "dev_ccc_valence", "dev_ccc_dominance"])
        for (a, b), s in scores.items():
            w.writerow([a, b, *[repr(s.get(k, float("nan"))) for k in ("arousal", "valence", "dominance")]])
    for attr, (a, b) in best.items():
        print(f"{attr:<10} alpha={a:.1f} beta={b:.1f} dev CCC={scores[(a, b)][attr]:.4f}")
    return 0


def _parse_map(text):
    if not text:
        return None
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 4:
        raise LadderError("--label-map expects src_lo,src_hi,dst_lo,dst_hi")
    return tuple(vals)


def cmd_evaluate(args) -> int:
    ckpt = checkpoint_load(args.checkpoint)
    cfg = RunConfig.from_dict(ckpt.config)
    kind = SENTENCE if cfg.model == "dense-HLD" else FRAME
    ds = load_features(args.features, fmt=args.format or None, kind=kind)
    ds = attach_labels(ds, load_labels(args.labels))
    split = None if args.split == "all" else args.split
    report = evaluate(ckpt, ds, label_map=_parse_map(args.label_map), split=split, n_folds=args.folds)
    print(render_report(report))
    if args.out:
        save_report(report, args.out)
    return 0


def cmd_compare(args) -> int:
    a, b = load_report(args.a), load_report(args.b)
    results = compare(a, b, test=args.test)
    print(render_comparison(a, b, results, names=(args.name_a, args.name_b)))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attribute", "statistic", "p_value", "significant", "note"])
            for attr, res in results.items():
                if isinstance(res, Exception):
                    w.writerow([attr, "", "", "", f"degenerate: {res}"])
                else:
                    w.writerow([attr, repr(res.statistic), repr(res.p_value), int(res.significant), ""])
    return 0


def cmd_synth(args) -> int:
    ds = synth_generate(args.n_labeled, args.n_unlabeled, args.dim, args.latent_k, noise=args.noise,
                        seed=args.seed, n_dev=args.n_dev, n_test=args.n_test)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = ".bin" if args.format == "bin" else ".csv"
    save_features(ds, out / f"features{suffix}")
    save_labels(ds, out / "labels.csv")
    print(f"wrote {len(ds)} samples ({args.dim} features) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ladder-ser", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one system and write the best-dev checkpoint")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid-search", help="search MTL (alpha, beta) on the 0.1 simplex grid")
    _add_config_flags(p)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--out", required=True, help="CSV of dev scores per grid point")
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labeled split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--format", default="")
    p.add_argument("--split", default="test", help="train/dev/test or 'all'")
    p.add_argument("--label-map", help="src_lo,src_hi,dst_lo,dst_hi affine map for predictions")
    p.add_argument("--folds", type=int, default=None, help="also report per-fold CCC")
    p.add_argument("--out", help="machine-readable CSV report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="significance test between two evaluation reports")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--test", choices=("fisher", "paired_t"), default="fisher")
    p.add_argument("--name-a", default="A")
    p.add_argument("--name-b", default="B")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="generate the synthetic semi-supervised task")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-labeled", type=int, default=200)
    p.add_argument("--n-unlabeled", type=int, default=20000)
    p.add_argument("--n-dev", type=int, default=500)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--latent-k", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "bin"), default="csv")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (LadderError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
