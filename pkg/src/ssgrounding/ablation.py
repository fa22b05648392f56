"""Ablation grids: supervision toggles and the construction x pooling table."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .estimator import TrainingDivergedError
from .experiment import Splits, build_splits, evaluate, make_estimator, resolve_vocab_size
from .io import write_csv
from .supportset import Construction, EmptySupportSetError, PoolingMethod

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationCell:
    mode: str
    use_contrast: bool = True
    use_caption: bool = True
    construction: str = "V-SS"
    pooling: str = "CA"

    @property
    def name(self) -> str:
        if self.mode == "baseline":
            return "baseline"
        parts = [self.mode]
        if self.mode == "ss":
            parts.append(f"{self.construction}+{self.pooling}")
        parts.append({(True, True): "contrast+caption", (True, False): "contrast",
                      (False, True): "caption", (False, False): "none"}[
                          (self.use_contrast, self.use_caption)])
        return "/".join(parts)

    def overrides(self) -> dict:
        return dict(mode=self.mode, use_contrast=self.use_contrast, use_caption=self.use_caption,
                    construction=self.construction, pooling=self.pooling)


@dataclass
class AblationRow:
    cell: AblationCell
    seed: int
    metrics: dict = field(default_factory=dict)  # label -> rate
    error: Optional[str] = None


def toggle_cells(modes: Sequence[str] = ("gtc", "ss")) -> list:
    """Baseline plus the 2 x 2 (contrast, caption) grid for each supervision mode."""
    cells = [AblationCell("baseline", False, False)]
    for mode in modes:
        for contrast, caption in itertools.product((True, False), repeat=2):
            cells.append(AblationCell(mode, contrast, caption))
    return cells


def grid_cells() -> list:
    """The 3 x 6 support-set grid, both objectives on."""
    return [AblationCell("ss", True, True, c.value, p.value)
            for c, p in itertools.product(Construction, PoolingMethod)]


def run_cell(cfg: ExperimentConfig, cell: AblationCell, seed: int,
             splits: Optional[Splits] = None) -> AblationRow:
    """Train and evaluate one cell; expected failures become a row-level error."""
    run_cfg = cfg.replace(seed=seed, **cell.overrides())
    splits = splits or build_splits(run_cfg)
    row = AblationRow(cell, seed)
    try:
        est = make_estimator(run_cfg, vocab_size=resolve_vocab_size(run_cfg, splits))
        est.fit(splits.train, validation=splits.val)
        report = evaluate(est, splits.test, run_cfg)
        row.metrics = {report.rank_label(n, m): v for (n, m), v in report.rank.items()}
    except (EmptySupportSetError, TrainingDivergedError) as exc:
        logger.warning("cell %s seed %d failed: %s", cell.name, seed, exc)
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def run_ablation(cfg: ExperimentConfig, cells: Iterable[AblationCell], seeds: Sequence[int],
                 progress: Optional[Callable[[AblationRow], None]] = None) -> list:
    rows = []
    for seed in seeds:
        splits = build_splits(cfg.replace(seed=seed))
        for cell in cells:
            row = run_cell(cfg, cell, seed, splits)
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def metric_labels(rows: Sequence[AblationRow]) -> list:
    labels = []
    for r in rows:
        labels += [k for k in r.metrics if k not in labels]
    return labels


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    labels = metric_labels(rows)
    header = ["cell", "mode", "use_contrast", "use_caption", "construction", "pooling", "seed",
              *labels, "error"]
    out = []
    for r in rows:
        c = r.cell
        out.append([c.name, c.mode, int(c.use_contrast), int(c.use_caption), c.construction,
                    c.pooling, r.seed, *[r.metrics.get(k, "") for k in labels], r.error or ""])
    write_csv(path, header, out)


def aggregate(rows: Sequence[AblationRow]) -> dict:
    """Per-cell mean of each metric over the seeds that ran without error."""
    by_cell = {}
    for r in rows:
        if r.error is None:
            by_cell.setdefault(r.cell, []).append(r.metrics)
    return {cell: {k: float(np.mean([m[k] for m in ms])) for k in ms[0]}
            for cell, ms in by_cell.items()}


def write_summary_csv(path, rows: Sequence[AblationRow]) -> None:
    agg = aggregate(rows)
    labels = metric_labels(rows)
    write_csv(path, ["cell", *[f"mean {k}" for k in labels]],
              [[cell.name, *[m.get(k, "") for k in labels]] for cell, m in agg.items()])
