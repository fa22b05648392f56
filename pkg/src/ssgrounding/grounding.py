"""Grounding substrate: a planted-entity synthetic world, a proposal scorer that
supplies the base grounding loss, and the temporal evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .numerics import sigmoid
from .objectives import LossBundle
from .supportset import GroundTruthInterval

DEFAULT_RECALL_THRESHOLDS = (0.02, 0.04, 0.06)
# fixed logit scale of the proposal scorer; unit-norm fusion terms are otherwise too flat
GROUNDER_SCALE = 10.0


# -- samples and the synthetic world ----------------------------------------

def seconds_to_clips(t_s: float, t_e: float, clip_duration_s: float, T: int) -> GroundTruthInterval:
    """floor(start / dur) .. ceil(end / dur) - 1, clamped into [0, T - 1]."""
    start = int(math.floor(t_s / clip_duration_s))
    end = int(math.ceil(t_e / clip_duration_s)) - 1
    start = min(max(start, 0), T - 1)
    end = min(max(end, start), T - 1)
    return GroundTruthInterval(start, end)


def clips_to_seconds(start_clip: int, end_clip: int, clip_duration_s: float):
    return start_clip * clip_duration_s, (end_clip + 1) * clip_duration_s


@dataclass
class GroundingSample:
    video_id: str
    features: np.ndarray  # (T, D_v)
    tokens: np.ndarray
    gt_seconds: tuple
    clip_duration_s: float = 1.0
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        t_s, t_e = (float(v) for v in self.gt_seconds)
        self.gt_seconds = (t_s, t_e)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.video_id}: features must be a (T, D_v) matrix")
        if not (0.0 <= t_s < t_e <= self.T * self.clip_duration_s + 1e-9):
            raise ValueError(f"{self.video_id}: ground truth {self.gt_seconds} outside the video")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def gt(self) -> GroundTruthInterval:
        return seconds_to_clips(*self.gt_seconds, self.clip_duration_s, self.T)

    @property
    def duration_s(self) -> float:
        return self.T * self.clip_duration_s


@dataclass
class SyntheticWorldConfig:
    n_entities: int = 24
    n_actions: int = 12
    D_v: int = 64
    T: int = 16
    noise_sigma: float = 0.1
    entities_per_video: int = 2
    entity_presence: float = 0.8
    distractor_prob: float = 0.3
    gt_fraction: tuple = (0.2, 0.5)
    clip_duration_s: float = 1.0
    vocab_size: Optional[int] = None
    world_seed: int = 0

    def __post_init__(self):
        if min(self.n_entities, self.n_actions, self.D_v, self.T, self.entities_per_video) < 1:
            raise ValueError("synthetic world counts must be positive")
        if self.entities_per_video > self.n_entities:
            raise ValueError("entities_per_video exceeds n_entities")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.gt_fraction
        if not (0 < lo <= hi <= 1):
            raise ValueError("gt_fraction must be a range inside (0, 1]")
        if self.vocab_size is None:
            self.vocab_size = self.n_entities + self.n_actions
        elif self.vocab_size < self.n_entities + self.n_actions:
            raise ValueError("vocab_size too small for entity and action tokens")

    def action_token(self, action: int) -> int:
        return self.n_entities + action


def _unit_rows(rng, n, d):
    M = rng.normal(size=(n, d))
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def synthetic_world_vectors(cfg: SyntheticWorldConfig):
    """The fixed entity and action directions of the world ``cfg.world_seed``."""
    rng = np.random.default_rng([cfg.world_seed, 0])
    return _unit_rows(rng, cfg.n_entities, cfg.D_v), _unit_rows(rng, cfg.n_actions, cfg.D_v)


def generate_synthetic_dataset(cfg: SyntheticWorldConfig, n_samples: int, seed: int) -> list:
    """Videos whose clips mix the query's entities everywhere and its action only in GT.

    Each clip holds every sampled entity independently with probability
    ``entity_presence``; GT clips add the query action; background clips carry a
    different (distractor) action with probability ``distractor_prob``. The
    world vectors come from ``cfg.world_seed``; ``seed`` only drives sampling,
    so splits drawn with different seeds share one world.
    """
    entity_vecs, action_vecs = synthetic_world_vectors(cfg)
    rng = np.random.default_rng([seed, 1])
    T, k = cfg.T, cfg.entities_per_video
    samples = []
    for n in range(n_samples):
        ents = rng.choice(cfg.n_entities, size=k, replace=False)
        action = int(rng.integers(cfg.n_actions))
        frac = rng.uniform(*cfg.gt_fraction)
        length = int(min(max(round(frac * T), 1), T))
        start = int(rng.integers(0, T - length + 1))
        gt_mask = np.zeros(T, dtype=bool)
        gt_mask[start:start + length] = True
        presence = rng.random((T, k)) < cfg.entity_presence
        distract = (rng.random(T) < cfg.distractor_prob) & ~gt_mask
        if cfg.n_actions > 1:
            others = (action + rng.integers(1, cfg.n_actions, size=T)) % cfg.n_actions
        else:
            distract[:] = False
            others = np.zeros(T, dtype=int)
        noise = rng.normal(size=(T, cfg.D_v))
        F = presence.astype(float) @ entity_vecs[ents]
        F += gt_mask[:, None] * action_vecs[action]
        F += distract[:, None] * action_vecs[others]
        F += cfg.noise_sigma * noise
        tokens = np.concatenate([ents, [cfg.action_token(action)]]).astype(np.int64)
        gt_s = clips_to_seconds(start, start + length - 1, cfg.clip_duration_s)
        samples.append(GroundingSample(
            video_id=f"syn{seed}_{n:05d}", features=F, tokens=tokens, gt_seconds=gt_s,
            clip_duration_s=cfg.clip_duration_s,
            meta={"entities": ents, "action": action, "presence": presence,
                  "distractor": distract, "distractor_action": np.where(distract, others, -1)}))
    return samples


# -- proposals and the base grounding loss ----------------------------------

@dataclass
class Proposal:
    start_clip: int
    end_clip: int
    score: float = 0.0


def enumerate_proposals(T: int) -> list:
    if T < 1:
        raise ValueError("T must be at least 1")
    starts, ends = proposal_bounds(T)
    return [Proposal(int(s), int(e)) for s, e in zip(starts, ends)]


@lru_cache(maxsize=64)
def proposal_bounds(T: int):
    s, e = np.triu_indices(T)
    s.setflags(write=False)
    e.setflags(write=False)
    return s, e


@lru_cache(maxsize=64)
def _proposal_operators(T: int):
    """Averaging operators: inside-span mean and outside-span (context) mean,
    both taken relative to the whole-video mean (the full video has no context)."""
    s, e = proposal_bounds(T)
    t = np.arange(T)
    inside = (t[None, :] >= s[:, None]) & (t[None, :] <= e[:, None])
    n_in = inside.sum(axis=1, keepdims=True)
    n_out = T - n_in
    A_in = inside / n_in - 1.0 / T
    A_out = np.where(n_out > 0, np.where(inside, 0.0, 1.0) / np.maximum(n_out, 1) - 1.0 / T, 0.0)
    A_in.setflags(write=False)
    A_out.setflags(write=False)
    return A_in, A_out


def init_grounder_params(D: int, rng: np.random.Generator) -> dict:
    bound = 1.0 / np.sqrt(D)
    return {
        "grd_in": rng.uniform(-bound, bound, size=D),
        "grd_out": rng.uniform(-bound, bound, size=D),
        "grd_b": np.zeros(1),
    }


def score_proposals(X, y, params: dict, scale: float = GROUNDER_SCALE):
    """Proposal logits for one video; returns ``(logits, cache)``.

    logit = scale * (grd_in . (mean_inside * y) + grd_out . (mean_outside * y)) + grd_b,
    i.e. Hadamard fusion of the span (and its complement) with the query. Both
    means are centred on the whole-video mean.
    """
    X = np.asarray(X, dtype=np.float64)
    A_in, A_out = _proposal_operators(X.shape[0])
    u = scale * params["grd_in"] * y
    v = scale * params["grd_out"] * y
    r, q = X @ u, X @ v
    logits = A_in @ r + A_out @ q + params["grd_b"][0]
    return logits, {"X": X, "y": np.asarray(y, dtype=np.float64), "u": u, "v": v, "scale": scale}


def score_proposals_backward(d_logits, cache, params: dict) -> dict:
    X, y, u, v, c = cache["X"], cache["y"], cache["u"], cache["v"], cache["scale"]
    A_in, A_out = _proposal_operators(X.shape[0])
    dr, dq = d_logits @ A_in, d_logits @ A_out
    du, dv = c * (dr @ X), c * (dq @ X)
    return {
        "X": np.outer(dr, u) + np.outer(dq, v),
        "y": du * params["grd_in"] + dv * params["grd_out"],
        "grd_in": du * y,
        "grd_out": dv * y,
        "grd_b": np.array([d_logits.sum()]),
    }


def batch_proposal_logits(X_list, Y, params: dict, scale: float = GROUNDER_SCALE) -> list:
    """Proposal logits for many videos at once (grouped by length), one array per video."""
    out = [None] * len(X_list)
    lengths = np.array([x.shape[0] for x in X_list])
    for T in np.unique(lengths):
        idx = np.flatnonzero(lengths == T)
        X3 = np.stack([X_list[i] for i in idx])
        Yg = np.asarray(Y)[idx]
        A_in, A_out = _proposal_operators(int(T))
        r = np.einsum("btd,bd->bt", X3, scale * params["grd_in"] * Yg)
        q = np.einsum("btd,bd->bt", X3, scale * params["grd_out"] * Yg)
        logits = r @ A_in.T + q @ A_out.T + params["grd_b"][0]
        for j, i in enumerate(idx):
            out[i] = logits[j]
    return out


def bce_with_logits(logits, targets):
    """Per-element binary cross-entropy, stable for large |logit|."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))


def iou_targets(T: int, gt: GroundTruthInterval, min_iou: float = 0.5, max_iou: float = 1.0):
    """BCE targets: IoU with gt rescaled from [min_iou, max_iou] onto [0, 1]."""
    return _iou_targets(int(T), gt.start_clip, gt.end_clip, float(min_iou), float(max_iou))


@lru_cache(maxsize=8192)
def _iou_targets(T, start, end, min_iou, max_iou):
    s, e = proposal_bounds(T)
    ious = interval_iou_many(s, e + 1, start, end + 1)
    out = np.clip((ious - min_iou) / (max_iou - min_iou), 0.0, 1.0)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=8192)
def _stacked_targets(T, gts, min_iou, max_iou):
    out = np.stack([iou_targets(T, gt, min_iou, max_iou) for gt in gts])
    out.setflags(write=False)
    return out


def grounding_loss(logits, targets) -> LossBundle:
    """Mean BCE over one video's proposals; gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.size
    value = float(np.mean(bce_with_logits(logits, targets)))
    return LossBundle(value, {"logits": (sigmoid(logits) - targets) / n})


def batch_grounding_loss(X_list, Y, gts, params: dict, min_iou: float = 0.5,
                         max_iou: float = 1.0, scale: float = GROUNDER_SCALE,
                         with_grads: bool = True) -> LossBundle:
    """Base grounding loss averaged over the batch, with grads for clips, texts and scorer.

    Videos of equal length are scored together; the result matches looping
    :func:`score_proposals` and :func:`grounding_loss` item by item.
    """
    B = len(X_list)
    Y = np.asarray(Y, dtype=np.float64)
    grads = {"X": [None] * B, "Y": np.zeros_like(Y), "grd_in": np.zeros_like(params["grd_in"]),
             "grd_out": np.zeros_like(params["grd_out"]), "grd_b": np.zeros(1)}
    value = 0.0
    lengths = np.array([x.shape[0] for x in X_list])
    for T in np.unique(lengths):
        idx = np.flatnonzero(lengths == T)
        X3 = np.stack([X_list[i] for i in idx])
        Yg = Y[idx]
        A_in, A_out = _proposal_operators(int(T))
        targets = _stacked_targets(int(T), tuple(gts[i] for i in idx), min_iou, max_iou)
        u = scale * params["grd_in"] * Yg
        v = scale * params["grd_out"] * Yg
        r = np.einsum("btd,bd->bt", X3, u)
        q = np.einsum("btd,bd->bt", X3, v)
        logits = r @ A_in.T + q @ A_out.T + params["grd_b"][0]
        P = logits.shape[1]
        value += float(np.sum(bce_with_logits(logits, targets))) / (P * B)
        if not with_grads:
            continue
        d_logits = (sigmoid(logits) - targets) / (P * B)
        dr, dq = d_logits @ A_in, d_logits @ A_out
        dX3 = dr[:, :, None] * u[:, None, :] + dq[:, :, None] * v[:, None, :]
        du = scale * np.einsum("bt,btd->bd", dr, X3)
        dv = scale * np.einsum("bt,btd->bd", dq, X3)
        for j, i in enumerate(idx):
            grads["X"][i] = dX3[j]
        grads["Y"][idx] = du * params["grd_in"] + dv * params["grd_out"]
        grads["grd_in"] += np.sum(du * Yg, axis=0)
        grads["grd_out"] += np.sum(dv * Yg, axis=0)
        grads["grd_b"] += d_logits.sum()
    return LossBundle(value, grads if with_grads else {})


# -- metrics ----------------------------------------------------------------

def temporal_iou(a, b) -> float:
    """Intersection over union of two [start, end] intervals; 0 if the union is empty."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def interval_iou_many(starts, ends, g_start, g_end):
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    inter = np.clip(np.minimum(ends, g_end) - np.maximum(starts, g_start), 0.0, None)
    union = (ends - starts) + (g_end - g_start) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_order(starts, ends, scores) -> np.ndarray:
    """Visiting order: score descending, then earlier start, shorter span, input position."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), ends - starts, starts, -scores))


def nms_indices(starts, ends, scores, threshold: float = 0.5, top_k=None) -> np.ndarray:
    """Indices kept by greedy NMS, in ranking order."""
    if not 0 < threshold <= 1:
        raise ValueError("NMS threshold must lie in (0, 1]")
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    remaining = nms_order(starts, ends, scores)
    kept = []
    while remaining.size and (top_k is None or len(kept) < top_k):
        best = remaining[0]
        kept.append(best)
        rest = remaining[1:]
        ious = interval_iou_many(starts[rest], ends[rest], starts[best], ends[best])
        remaining = rest[ious < threshold]
    return np.array(kept, dtype=int)


def nms(proposals: Sequence, threshold: float = 0.5, top_k=None) -> list:
    """Greedy suppression over (start, end, score) triples or :class:`Proposal` objects.

    The highest-ranked remaining span is kept and every span whose IoU with it
    is >= threshold is discarded, until nothing remains.
    """
    if len(proposals) == 0:
        return []
    trip = np.array([(p.start_clip, p.end_clip, p.score) if isinstance(p, Proposal) else tuple(p)[:3]
                     for p in proposals], dtype=np.float64)
    if trip.size and isinstance(proposals[0], Proposal):
        # clip indices are inclusive
        trip[:, 1] += 1.0
    keep = nms_indices(trip[:, 0], trip[:, 1], trip[:, 2], threshold, top_k)
    return [proposals[k] for k in keep]


def rank_n_at_m(ranked, gt, n: int, m: float) -> bool:
    """True iff one of the top-n (start, end, ...) predictions has IoU >= m with gt."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 < m <= 1:
        raise ValueError("m must lie in (0, 1]")
    return any(temporal_iou(p, gt) >= m for p in list(ranked)[:n])


def rank_n_at_m_rate(all_ranked: Sequence, gts: Sequence, n: int, m: float) -> float:
    if len(all_ranked) != len(gts):
        raise ValueError("one ranked list per query is required")
    if not gts:
        return 0.0
    hits = [rank_n_at_m(r, g, n, m) for r, g in zip(all_ranked, gts)]
    return float(np.mean(hits))


def mean_pair_similarity(X, y, gt: Optional[GroundTruthInterval] = None) -> float:
    """Average cosine between text and clips (all clips, or GT clips when gt is given)."""
    X = np.asarray(X, dtype=np.float64)
    if gt is not None:
        X = X[gt.start_clip:gt.end_clip + 1]
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    yn = np.asarray(y) / np.linalg.norm(y)
    return float(np.mean(Xn @ yn))


def recall_high_related(similarities, thresholds=DEFAULT_RECALL_THRESHOLDS) -> dict:
    """Fraction of matched pairs whose similarity reaches each threshold."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.size == 0:
        return {float(t): 0.0 for t in thresholds}
    return {float(t): float(np.mean(sims >= t)) for t in thresholds}


def interval_histogram(intervals, durations, bins: int = 10):
    """2-D counts over (start / video length, span length / video length)."""
    iv = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    dur = np.asarray(durations, dtype=np.float64).reshape(-1)
    start_frac = np.clip(iv[:, 0] / dur, 0.0, 1.0) if iv.size else np.zeros(0)
    len_frac = np.clip((iv[:, 1] - iv[:, 0]) / dur, 0.0, 1.0) if iv.size else np.zeros(0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist, _, _ = np.histogram2d(start_frac, len_frac, bins=[edges, edges])
    return hist, edges


@dataclass
class MetricsReport:
    rank: dict  # (n, m) -> rate
    recall: dict = field(default_factory=dict)  # variant -> {threshold: rate}
    histogram: Optional[np.ndarray] = None

    def __post_init__(self):
        for rate in self.rank.values():
            if not 0.0 <= rate <= 1.0:
                raise ValueError("rates must lie in [0, 1]")

    def rank_label(self, n: int, m: float) -> str:
        return f"R{n}@{m:g}"
