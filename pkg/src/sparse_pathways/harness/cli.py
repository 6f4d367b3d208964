"""Command-line entry point: ``sparse-pathways <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("sparse_pathways")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (see README for the schema)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="run directory (overrides the config)")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-pathways",
                                     description="Language-specific structured pruning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic 4-language corpora")
    _common(p)

    p = sub.add_parser("train-dense", help="train the multilingual dense model theta_0")
    _common(p)
    p.add_argument("--no-lasso", action="store_true", help="train without group lasso (ablation)")
    p.add_argument("--small", action="store_true", help="train the small monolingual dense baseline")
    p.add_argument("--language", help="language for --small")

    p = sub.add_parser("prune", help="learn a mask with IMP or LTH")
    _common(p)
    p.add_argument("--mode", choices=["imp", "lth"], required=True)
    p.add_argument("--language", required=True, help=f"language id or '{pl.AGNOSTIC}'")
    p.add_argument("--theta0", choices=["lasso", "nolasso"], default="lasso")

    p = sub.add_parser("train-pathways", help="joint training with per-language masks")
    _common(p)
    p.add_argument("--mask-source", choices=["imp", "lth", "random"], required=True)
    p.add_argument("--theta0", choices=["lasso", "nolasso"], default="lasso")

    p = sub.add_parser("evaluate", help="per-language test loss/accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--masks", help="mask file (per-language bundle or a single agnostic mask)")
    p.add_argument("--name", help="model name in the results CSV")
    p.add_argument("--variant", help="variant label in the results CSV")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--results", help="results CSV to append to (default <out>/results.csv)")

    p = sub.add_parser("analyze-masks", help="pairwise IOU and union ratio of mask sets")
    _common(p)
    p.add_argument("--mask-source", choices=["imp", "lth"], action="append",
                   help="analyse the per-language masks of a pruning mode (repeatable)")
    p.add_argument("--masks", nargs="+", help="mask files to analyse as one set")
    p.add_argument("--theta0", choices=["lasso", "nolasso"], default="lasso")
    p.add_argument("--csv", help="output CSV (default <out>/mask_stats.csv)")

    p = sub.add_parser("run-matrix", help="run the full experiment matrix")
    _common(p)
    p.add_argument("--no-lasso-ablation", action="store_true", help="skip the group-lasso ablation arm")
    p.add_argument("--no-figures", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, out=args.out).validate()


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def cmd_gen_data(cfg, args) -> int:
    suite = pl.gen_data(cfg, force=args.force)
    for s in suite.specs:
        print(f"{s.language}: " + ", ".join(f"{k}={v}" for k, v in s.counts.items()))
    return 0


def cmd_train_dense(cfg, args) -> int:
    data = pl.load_data(cfg)
    ws = pl.Workspace(cfg.out)
    if args.small:
        if not args.language:
            raise ValueError("--small needs --language")
        _guard(ws.small_dense(args.language), args.force)
        pl.train_small_dense(cfg, data, args.language)
        print(ws.small_dense(args.language))
        return 0
    tag = "nolasso" if args.no_lasso else "lasso"
    _guard(ws.dense(tag), args.force)
    pl.train_dense(cfg, data, lasso=not args.no_lasso)
    print(ws.dense(tag))
    return 0


def cmd_prune(cfg, args) -> int:
    data = pl.load_data(cfg)
    ws = pl.Workspace(cfg.out)
    _guard(ws.mask(args.theta0, args.mode, args.language), args.force)
    theta0, _ = pl.load_model(ws.dense(args.theta0))
    out = pl.prune(cfg, data, theta0, args.mode, args.language, args.theta0)
    print(f"mask {ws.mask(args.theta0, args.mode, args.language)}: sparsity {out.mask.sparsity():.4f} "
          f"after {len(out.result.iterations)} iterations; post-prune loss {out.result.post_prune_loss:.4f}")
    return 0


def cmd_train_pathways(cfg, args) -> int:
    data = pl.load_data(cfg)
    ws = pl.Workspace(cfg.out)
    _guard(ws.pathways(args.theta0, args.mask_source), args.force)
    theta0, _ = pl.load_model(ws.dense(args.theta0))
    pl.train_pathways_stage(cfg, data, theta0, args.mask_source, args.theta0)
    print(ws.pathways(args.theta0, args.mask_source))
    return 0


def cmd_evaluate(cfg, args) -> int:
    data = pl.load_data(cfg)
    row = pl.evaluate_checkpoint(cfg, data, args.checkpoint, args.masks, args.name, args.variant, args.split)
    path = Path(args.results) if args.results else pl.Workspace(cfg.out).results
    pl.append_results(path, [row])
    for r in row.csv_rows():
        print(",".join(r))
    return 0


def cmd_analyze_masks(cfg, args) -> int:
    from ..model import load_masks

    ws = pl.Workspace(cfg.out)
    sets = {}
    if args.masks:
        masks = {}
        for f in args.masks:
            for key, m in load_masks(f).items():
                masks[key if key not in masks else f"{Path(f).stem}:{key}"] = m
        sets["custom"] = masks
    for source in args.mask_source or []:
        data = pl.load_data(cfg)
        sets[source] = pl.pathways_masks(cfg, data, source, args.theta0)
    if not sets:
        raise ValueError("give --mask-source and/or --masks")
    csv_path = Path(args.csv) if args.csv else ws.stats
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    reports = pl.analyze_masks(sets, csv_path, csv_path.with_suffix(".txt"))
    for name, s in reports.items():
        print(s.render(f"[{name}]"))
    return 0


def cmd_run_matrix(cfg, args) -> int:
    from dataclasses import replace

    if args.no_lasso_ablation:
        cfg = replace(cfg, lasso_ablation=False)
    if args.no_figures:
        cfg = replace(cfg, figures=False)
    _guard(pl.Workspace(cfg.out).results, args.force)
    result = pl.run_matrix(cfg)
    print(f"{'model':24s} {'variant':16s} {'sparsity':>8s} {'avg loss':>9s} {'avg acc':>8s}")
    for r in result.rows:
        print(f"{r.model:24s} {r.variant:16s} {r.sparsity:8.4f} {r.avg_loss:9.4f} {r.avg_accuracy:8.4f}")
    for name, s in result.stats.items():
        print(f"{name}: mean pairwise IOU {s.mean_pairwise_iou():.4f}, union ratio {s.union_ratio:.4f}")
    print(f"results: {pl.Workspace(cfg.out).results} ({result.seconds:.0f}s)")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dense": cmd_train_dense,
    "prune": cmd_prune,
    "train-pathways": cmd_train_pathways,
    "evaluate": cmd_evaluate,
    "analyze-masks": cmd_analyze_masks,
    "run-matrix": cmd_run_matrix,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, pl.ArtifactError, pl.StageError, FileExistsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
