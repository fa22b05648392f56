"""Command-line entry point: train, evaluate, ablate, report, gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import ablation, experiment, gradcheck
from .config import ConfigError, ExperimentConfig, default_output_dir, dump_config, load_config
from .estimator import SupportSetGrounder
from .io import CheckpointError, ManifestError, load_checkpoint, save_checkpoint, write_csv, write_predictions
from .reports import emit_reports

logger = logging.getLogger("ssgrounding")

CHECKPOINT_NAME = "checkpoint.npz"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread limit; 1 gives bitwise-reproducible runs")
    p.add_argument("--mode", choices=["baseline", "gtc", "ss"])
    p.add_argument("--construction", choices=["v-ss", "gt-ss", "non-gt-ss"])
    p.add_argument("--pooling", choices=["ca", "sa", "fc", "conv", "mp", "ap"])
    p.add_argument("--out", type=Path, help="output directory (default: $SSGROUNDING_OUT or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssgrounding", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train one configuration and save a checkpoint")
    _common(p)
    p = sub.add_parser("evaluate", help="Rank n@m of a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help=f"default: <out>/{CHECKPOINT_NAME}")
    p = sub.add_parser("ablate", help="supervision-toggle and support-set grids")
    _common(p)
    p.add_argument("--grid", choices=["toggles", "supportset", "all"], default="all")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at --seed")
    p = sub.add_parser("report", help="similarity matrix, recall curves, interval histogram")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help=f"default: <out>/{CHECKPOINT_NAME}")
    p = sub.add_parser("gradcheck", help="finite-difference suite over objectives and grid cells")
    _common(p)
    p.add_argument("--seeds", type=int, default=100)
    return parser


def _config(args) -> ExperimentConfig:
    return load_config(args.config, {"seed": args.seed, "mode": args.mode,
                                     "construction": args.construction, "pooling": args.pooling})


def _out(args) -> Path:
    return experiment.output_dir(args.out or default_output_dir())


def _load_estimator(args, cfg: ExperimentConfig, out: Path) -> SupportSetGrounder:
    ckpt = load_checkpoint(args.checkpoint or out / CHECKPOINT_NAME, cfg.config_hash())
    return SupportSetGrounder.from_checkpoint(ckpt)


def cmd_train(args) -> int:
    cfg, out = _config(args), _out(args)
    splits = experiment.build_splits(cfg)
    t0 = time.perf_counter()
    est = experiment.train(cfg, splits)
    logger.info("trained %d steps in %.1fs", est.step_, time.perf_counter() - t0)
    (out / "config.txt").write_text(dump_config(cfg))
    save_checkpoint(out / CHECKPOINT_NAME, est.to_checkpoint(cfg.config_hash()))
    experiment.write_training_log(out / "train_log.csv", est.history_)
    report = experiment.evaluate(est, splits.test, cfg)
    experiment.write_metrics(out / "metrics.csv", report)
    write_predictions(out / "predictions.jsonl", splits.test,
                      est.predict(splits.test, top_k=max(cfg.rank_n)))
    for (n, m), v in report.rank.items():
        print(f"{report.rank_label(n, m)}\t{v:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, out = _config(args), _out(args)
    est = _load_estimator(args, cfg, out)
    test = experiment.build_splits(cfg).test
    report = experiment.evaluate(est, test, cfg)
    experiment.write_metrics(out / "metrics.csv", report)
    write_predictions(out / "predictions.jsonl", test, est.predict(test, top_k=max(cfg.rank_n)))
    for (n, m), v in report.rank.items():
        print(f"{report.rank_label(n, m)}\t{v:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg, out = _config(args), _out(args)
    cells = []
    if args.grid in ("toggles", "all"):
        cells += ablation.toggle_cells()
    if args.grid in ("supportset", "all"):
        cells += [c for c in ablation.grid_cells() if c not in cells]
    seeds = range(cfg.seed, cfg.seed + args.seeds)

    def progress(row):
        status = row.error or ", ".join(f"{k}={v:.3f}" for k, v in row.metrics.items())
        print(f"{row.cell.name}\tseed {row.seed}\t{status}", flush=True)

    rows = ablation.run_ablation(cfg, cells, seeds, progress)
    ablation.write_ablation_csv(out / "ablation.csv", rows)
    ablation.write_summary_csv(out / "ablation_summary.csv", rows)
    return 0


def cmd_report(args) -> int:
    cfg, out = _config(args), _out(args)
    est = _load_estimator(args, cfg, out)
    test = experiment.build_splits(cfg).test
    paths = emit_reports(est, test, out / "reports", cfg.rank_n, cfg.rank_m,
                         cfg.recall_thresholds, cfg.histogram_bins)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return 0


def cmd_gradcheck(args) -> int:
    out = _out(args)
    seed = args.seed or 0
    t0 = time.perf_counter()
    rows = gradcheck.run_suite(range(seed, seed + args.seeds))
    elapsed = time.perf_counter() - t0
    summary = gradcheck.summarize(rows)
    print(f"{'objective':<14}{'construction':<14}{'pooling':<9}max rel error")
    for obj, cons, pool, err in summary:
        print(f"{obj:<14}{cons or '-':<14}{pool or '-':<9}{err:.3e}")
    worst = max(e for *_, e in summary)
    print(f"{len(rows)} checks over {args.seeds} seeds in {elapsed:.1f}s; worst {worst:.3e}")
    write_csv(out / "gradcheck.csv", ["objective", "construction", "pooling", "max_rel_error"],
              [(o, c or "", p or "", e) for o, c, p, e in summary])
    return 0 if worst < 1e-4 else 1


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "report": cmd_report, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (ConfigError, ManifestError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
