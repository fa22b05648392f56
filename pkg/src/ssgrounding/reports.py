"""Report files: similarity matrix, recall-of-related-pairs curves, interval histogram."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .estimator import SupportSetGrounder
from .grounding import DEFAULT_RECALL_THRESHOLDS, MetricsReport
from .io import write_csv, write_predictions

MATRIX_SIZE = 16


def write_similarity_matrix(path, M: np.ndarray, video_ids: Sequence[str]) -> None:
    """Rows are pooled videos, columns are texts (labelled by their video id)."""
    write_csv(path, ["video\\text", *video_ids],
              ([vid, *map(float, row)] for vid, row in zip(video_ids, M)))


def write_recall_curves(path, recall: dict) -> None:
    rows = [(variant, float(t), float(r)) for variant, curve in recall.items()
            for t, r in sorted(curve.items())]
    write_csv(path, ["variant", "threshold", "recall"], rows)


def write_histogram(path, hist: np.ndarray, bins: int) -> None:
    """Long format: one row per (start-fraction bin, length-fraction bin)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows = [(float(edges[i]), float(edges[i + 1]), float(edges[j]), float(edges[j + 1]),
             int(hist[i, j])) for i in range(bins) for j in range(bins)]
    write_csv(path, ["start_lo", "start_hi", "length_lo", "length_hi", "count"], rows)


def emit_reports(est: SupportSetGrounder, samples: list, out_dir, ns=(1, 5), ms=(0.5, 0.7),
                 thresholds=DEFAULT_RECALL_THRESHOLDS, bins: int = 10) -> dict:
    """Write every report for ``samples``; returns ``{name: path}``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    head = samples[:MATRIX_SIZE]
    paths = {name: out_dir / fname for name, fname in (
        ("similarity", "similarity_matrix.csv"), ("recall", "recall_curves.csv"),
        ("histogram", "interval_histogram.csv"), ("metrics", "metrics.csv"),
        ("predictions", "predictions.jsonl"))}
    write_similarity_matrix(paths["similarity"], est.similarity_matrix(head),
                            [s.video_id for s in head])
    report: MetricsReport = est.evaluate(samples, ns=ns, ms=ms, thresholds=thresholds, bins=bins)
    write_recall_curves(paths["recall"], report.recall)
    write_histogram(paths["histogram"], report.histogram, bins)
    write_csv(paths["metrics"], ["metric", "value"],
              [(report.rank_label(n, m), v) for (n, m), v in report.rank.items()])
    write_predictions(paths["predictions"], samples, est.predict(samples, top_k=max(ns)))
    return paths
