"""Glue between :class:`ExperimentConfig` and the estimator: data splits, training, evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .estimator import SupportSetGrounder
from .grounding import MetricsReport, SyntheticWorldConfig, generate_synthetic_dataset
from .io import ingest_features, write_csv

logger = logging.getLogger(__name__)


@dataclass
class Splits:
    train: list
    val: list
    test: list


def world_config(cfg: ExperimentConfig) -> SyntheticWorldConfig:
    return SyntheticWorldConfig(
        n_entities=cfg.n_entities, n_actions=cfg.n_actions, D_v=cfg.D_v, T=cfg.T,
        noise_sigma=cfg.noise_sigma, entities_per_video=cfg.entities_per_video,
        entity_presence=cfg.entity_presence, distractor_prob=cfg.distractor_prob,
        clip_duration_s=cfg.clip_duration_s, vocab_size=cfg.vocab_size, world_seed=cfg.world_seed)


def build_splits(cfg: ExperimentConfig) -> Splits:
    """Synthetic splits share one world and draw samples from seed-derived streams.

    A manifest dataset without explicit val/test manifests is split by a
    seeded permutation into n_val / n_test held-out samples.
    """
    if cfg.dataset == "synthetic":
        wc = world_config(cfg)
        base = 3 * cfg.seed
        return Splits(generate_synthetic_dataset(wc, cfg.n_train, base),
                      generate_synthetic_dataset(wc, cfg.n_val, base + 1),
                      generate_synthetic_dataset(wc, cfg.n_test, base + 2))
    samples = ingest_features(cfg.dataset)
    if cfg.val_dataset and cfg.test_dataset:
        return Splits(samples, ingest_features(cfg.val_dataset), ingest_features(cfg.test_dataset))
    order = np.random.default_rng([cfg.seed, 5]).permutation(len(samples))
    n_hold = cfg.n_val + cfg.n_test
    if len(samples) <= n_hold:
        raise ValueError(f"{len(samples)} samples cannot cover n_val + n_test = {n_hold}")
    val = [samples[i] for i in order[:cfg.n_val]]
    test = [samples[i] for i in order[cfg.n_val:n_hold]]
    train = [samples[i] for i in order[n_hold:]]
    if cfg.val_dataset:
        val = ingest_features(cfg.val_dataset)
    if cfg.test_dataset:
        test = ingest_features(cfg.test_dataset)
    return Splits(train, val, test)


def make_estimator(cfg: ExperimentConfig, **overrides) -> SupportSetGrounder:
    params = dict(
        mode=cfg.mode, construction=cfg.construction, pooling=cfg.pooling,
        use_contrast=cfg.use_contrast, use_caption=cfg.use_caption, tau=cfg.tau,
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, D=cfg.D, D_l=cfg.D_l, t_max=cfg.t_max,
        kernel_width=cfg.kernel_width, normalize_embeddings=cfg.normalize_embeddings,
        batch_size=cfg.batch_size, steps=cfg.steps, learning_rate=cfg.learning_rate,
        plateau_factor=cfg.plateau_factor, plateau_patience=cfg.plateau_patience,
        val_every=cfg.val_every, eval_every=cfg.eval_every, nms_threshold=cfg.nms_threshold,
        min_iou=cfg.min_iou, max_iou=cfg.max_iou, grounder_scale=cfg.grounder_scale,
        vocab_size=cfg.vocab_size, random_state=cfg.seed)
    params.update(overrides)
    return SupportSetGrounder(**params)


def train(cfg: ExperimentConfig, splits: Optional[Splits] = None) -> SupportSetGrounder:
    splits = splits or build_splits(cfg)
    est = make_estimator(cfg)
    est.set_params(vocab_size=resolve_vocab_size(cfg, splits))
    return est.fit(splits.train, validation=splits.val)


def resolve_vocab_size(cfg: ExperimentConfig, splits: Splits) -> int:
    """Configured size, else the synthetic world's, else one past the largest token of any split."""
    if cfg.vocab_size is not None:
        return cfg.vocab_size
    if cfg.dataset == "synthetic":
        return world_config(cfg).vocab_size
    every = splits.train + splits.val + splits.test
    return int(max(s.tokens.max() for s in every)) + 1


def evaluate(est: SupportSetGrounder, samples: list, cfg: ExperimentConfig) -> MetricsReport:
    return est.evaluate(samples, ns=cfg.rank_n, ms=cfg.rank_m, thresholds=cfg.recall_thresholds,
                        bins=cfg.histogram_bins)


LOG_COLUMNS = ("step", "lr", "vg", "contrast", "caption", "total", "val_loss", "val_rank1@0.5")


def write_training_log(path, history: list) -> None:
    write_csv(path, LOG_COLUMNS, ([h.get(c, "") for c in LOG_COLUMNS] for h in history))


def write_metrics(path, report: MetricsReport) -> None:
    rows = [(report.rank_label(n, m), rate) for (n, m), rate in report.rank.items()]
    write_csv(path, ("metric", "value"), rows)


def output_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def alignment_profile(est: SupportSetGrounder, samples: list) -> dict:
    """Mean clip/text cosine over GT clips and over background clips that show a query entity.

    Needs synthetic samples (their ``meta["presence"]`` marks entity clips).
    """
    gt_vals, shared_vals = [], []
    for s, sims in zip(samples, est.clip_text_similarities(samples)):
        gt = np.zeros(s.T, dtype=bool)
        gt[s.gt.indices()] = True
        shared = ~gt & s.meta["presence"].any(axis=1)
        gt_vals.append(sims[gt])
        shared_vals.append(sims[shared])
    return {"gt": float(np.mean(np.concatenate(gt_vals))),
            "shared_non_gt": float(np.mean(np.concatenate(shared_vals)))}
