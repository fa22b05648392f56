"""Cross-supervision objectives with analytic gradients.

All losses return a :class:`LossBundle` whose ``grads`` map names to arrays.
Per-video clip gradients are stored under ``"X"`` as a list aligned with the
batch; everything else is a plain array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .encoders import check_tokens, decode_token_logits
from .numerics import log_sum_exp, normalize_rows, normalize_rows_backward, stable_softmax
from .supportset import (
    Construction,
    GroundTruthInterval,
    PooledEmbedding,
    PoolingParams,
    build_support_set,
    pool,
    pool_backward,
)


class ContextSource(str, Enum):
    GT_CONCAT = "gt_concat"
    SUPPORT_POOLED = "support_pooled"


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1
    tau: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")


@dataclass
class EmbeddingBatch:
    X: list
    Y: np.ndarray
    gts: list

    def __post_init__(self):
        self.X = [np.asarray(x, dtype=np.float64) for x in self.X]
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if len(self.X) < 1:
            raise ValueError("batch must hold at least one item")
        if not (len(self.X) == self.Y.shape[0] == len(self.gts)):
            raise ValueError("X, Y and gts must have the same batch length")
        D = self.Y.shape[1]
        for i, (x, gt) in enumerate(zip(self.X, self.gts)):
            if x.ndim != 2 or x.shape[1] != D:
                raise ValueError(f"item {i}: clip matrix must be (T, {D})")
            gt.validate(x.shape[0])

    @property
    def size(self) -> int:
        return len(self.X)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([x.shape[0] for x in self.X])


@dataclass
class DecoderParams:
    weight: np.ndarray  # (D, V)
    bias: np.ndarray  # (V,)

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[1]


@dataclass
class CaptionContext:
    w: np.ndarray
    source: ContextSource
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class LossBundle:
    value: float
    grads: dict = field(default_factory=dict)

    def scaled(self, factor: float) -> "LossBundle":
        return LossBundle(self.value * factor,
                          {k: _scale(v, factor) for k, v in self.grads.items()})


def _scale(g, factor):
    if isinstance(g, list):
        return [factor * x for x in g]
    return factor * g


def _add(a, b):
    if isinstance(a, list):
        return [x + y for x, y in zip(a, b)]
    return a + b


def merge_grads(*grad_dicts) -> dict:
    out: dict = {}
    for grads in grad_dicts:
        for k, g in grads.items():
            out[k] = g if k not in out else _add(out[k], g)
    return out


# -- GT-clip MIL-NCE --------------------------------------------------------

def gt_clip_contrastive_loss(batch: EmbeddingBatch, weights: LossWeights) -> LossBundle:
    """Softmax MIL-NCE with the GT clips of each video as the positive bag.

    Every clip in the batch paired with text i appears in the denominator:
    background clips of video i and all clips of the other videos are the
    negatives.
    """
    tau = weights.tau
    C = np.concatenate(batch.X, axis=0)
    lengths = batch.lengths
    B = batch.size
    vid = np.repeat(np.arange(B), lengths)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    pos = np.zeros(C.shape[0], dtype=bool)
    for i, gt in enumerate(batch.gts):
        if gt.length < 1:
            raise ValueError(f"item {i}: empty positive set")
        pos[offsets[i] + gt.start_clip: offsets[i] + gt.end_clip + 1] = True
    P = (vid[:, None] == np.arange(B)[None, :]) & pos[:, None]

    S = C @ batch.Y.T / tau
    lse_all = log_sum_exp(S, axis=0)
    S_pos = np.where(P, S, -np.inf)
    lse_pos = log_sum_exp(S_pos, axis=0)
    value = float(np.sum(lse_all - lse_pos))

    soft_all = np.exp(S - lse_all[None, :])
    soft_pos = np.where(P, np.exp(S_pos - lse_pos[None, :]), 0.0)
    dS = (soft_all - soft_pos) / tau
    dC = dS @ batch.Y
    dY = dS.T @ C
    return LossBundle(value, {"X": np.split(dC, np.cumsum(lengths)[:-1]), "Y": dY})


# -- pooling over a batch ---------------------------------------------------

def pool_batch(batch: EmbeddingBatch, construction, params: PoolingParams) -> list:
    """Build each item's support set and pool it; the indices ride in the cache."""
    out = []
    for x, y, gt in zip(batch.X, batch.Y, batch.gts):
        support = build_support_set(x.shape[0], gt, construction)
        pooled = pool(x[support.clip_indices], y, params)
        pooled.cache["support_idx"] = support.clip_indices
        out.append(pooled)
    return out


def normalize_pooled(W, normalize: bool = True):
    """Renormalize pooled rows when asked. Returns ``(W, cache)``."""
    W = np.asarray(W, dtype=np.float64)
    if not normalize:
        return W, None
    Wn, norms = normalize_rows(W)
    return Wn, (Wn, norms)


def normalize_pooled_backward(dW, cache):
    if cache is None:
        return dW
    return normalize_rows_backward(dW, *cache)


def backprop_pooled(pooled: Sequence[PooledEmbedding], d_wbar, batch: EmbeddingBatch,
                    params: Optional[PoolingParams] = None) -> dict:
    """Push dL/dw_bar (one row per item) back into clips, texts and pooling params."""
    dX = [np.zeros_like(x) for x in batch.X]
    dY = np.zeros_like(batch.Y)
    d_params: dict = {}
    for i, p in enumerate(pooled):
        d_S, d_y, d_par = pool_backward(p, d_wbar[i], params)
        np.add.at(dX[i], p.cache["support_idx"], d_S)
        if d_y is not None:
            dY[i] += d_y
        d_params = merge_grads(d_params, d_par)
    return {"X": dX, "Y": dY, **d_params}


# -- support-set contrastive ------------------------------------------------

def support_contrastive_terms(W_raw, Y, tau: float, normalize: bool = True):
    """InfoNCE value with gradients w.r.t. the raw pooled rows and the texts."""
    W, cache = normalize_pooled(W_raw, normalize)
    S = W @ Y.T / tau
    lse = log_sum_exp(S, axis=1)
    value = float(np.sum(lse - np.diag(S)))
    dS = (np.exp(S - lse[:, None]) - np.eye(S.shape[0])) / tau
    return value, normalize_pooled_backward(dS @ Y, cache), dS.T @ W


def support_contrastive_loss(pooled: Sequence[PooledEmbedding], batch: EmbeddingBatch,
                             weights: LossWeights, params: Optional[PoolingParams] = None,
                             normalize: bool = True, chain: bool = True) -> LossBundle:
    """InfoNCE between each pooled video vector and all texts of the batch.

    ``grads`` carries ``"w_bar"`` (w.r.t. the raw pooled vectors) plus the
    chained gradients for the clips, the texts and any pooling parameters.
    With ``chain=False`` the pooling step is not differentiated and ``"Y"``
    holds only the direct text gradient.
    """
    if len(pooled) != batch.size:
        raise ValueError("one pooled embedding per batch item is required")
    value, d_wbar, dY_direct = support_contrastive_terms(
        np.stack([p.w_bar for p in pooled]), batch.Y, weights.tau, normalize)
    if not chain:
        return LossBundle(value, {"w_bar": d_wbar, "Y": dY_direct})
    grads = backprop_pooled(pooled, d_wbar, batch, params)
    grads["Y"] = grads["Y"] + dY_direct
    grads["w_bar"] = d_wbar
    return LossBundle(value, grads)


# -- caption objective ------------------------------------------------------

def make_caption_context(X, gt: Optional[GroundTruthInterval], mode,
                         pooled: Optional[PooledEmbedding] = None,
                         cap_w=None, cap_b=None, normalize: bool = True) -> CaptionContext:
    """GT_CONCAT: affine map of the mean GT clip. SUPPORT_POOLED: the pooled vector."""
    mode = ContextSource(mode)
    if mode is ContextSource.SUPPORT_POOLED:
        if pooled is None:
            raise ValueError("SUPPORT_POOLED context needs a pooled embedding")
        if normalize:
            w, norms = normalize_rows(pooled.w_bar[None, :])
            return CaptionContext(w[0], mode, {"norm": (w, norms)})
        return CaptionContext(np.array(pooled.w_bar, dtype=np.float64), mode, {"norm": None})
    if gt is None:
        raise ValueError("GT_CONCAT context needs a ground-truth interval")
    X = np.asarray(X, dtype=np.float64)
    gt.validate(X.shape[0])
    mean_gt = X[gt.start_clip:gt.end_clip + 1].mean(axis=0)
    if cap_w is None:
        return CaptionContext(mean_gt, mode, {"mean": mean_gt, "gt": gt, "cap_w": None})
    return CaptionContext(mean_gt @ cap_w + cap_b, mode,
                          {"mean": mean_gt, "gt": gt, "cap_w": cap_w})


def caption_context_backward(ctx: CaptionContext, dw, T: Optional[int] = None) -> dict:
    """Returns ``{"X": dX_i, "cap_w", "cap_b"}`` for GT_CONCAT or ``{"w_bar": ...}``."""
    if ctx.source is ContextSource.SUPPORT_POOLED:
        cache = ctx.cache["norm"]
        d = dw if cache is None else normalize_rows_backward(dw[None, :], *cache)[0]
        return {"w_bar": d}
    gt, cap_w = ctx.cache["gt"], ctx.cache["cap_w"]
    out = {}
    if cap_w is None:
        d_mean = dw
    else:
        d_mean = cap_w @ dw
        out["cap_w"] = np.outer(ctx.cache["mean"], dw)
        out["cap_b"] = np.array(dw, dtype=np.float64)
    dX = np.zeros((T if T is not None else gt.end_clip + 1, dw.shape[0]))
    dX[gt.start_clip:gt.end_clip + 1] = d_mean / gt.length
    out["X"] = dX
    return out


def caption_loss(contexts, sentences, decoder: DecoderParams, token_bags=None) -> LossBundle:
    """Batch mean of per-token negative log-likelihood under a unigram head.

    ``grads["w"]`` is the (B, D) gradient w.r.t. the contexts. ``token_bags``
    may carry the precomputed (B, V) normalized token counts of ``sentences``.
    """
    Wc = np.stack([c.w if isinstance(c, CaptionContext) else np.asarray(c, dtype=np.float64)
                   for c in contexts])
    if len(sentences) != Wc.shape[0]:
        raise ValueError("contexts and sentences must align")
    B, V = Wc.shape[0], decoder.vocab_size
    if token_bags is not None:
        target = np.asarray(token_bags, dtype=np.float64)
    else:
        target = np.zeros((B, V))
        for i, sent in enumerate(sentences):
            toks = check_tokens(sent, V)
            np.add.at(target[i], toks, 1.0 / len(toks))
    logits = decode_token_logits(Wc, decoder.weight, decoder.bias)
    lse = log_sum_exp(logits, axis=1)
    value = float(np.mean(lse - np.sum(target * logits, axis=1)))
    d_logits = (stable_softmax(logits, 1.0, axis=1) - target) / B
    return LossBundle(value, {
        "w": d_logits @ decoder.weight.T,
        "dec_w": Wc.T @ d_logits,
        "dec_b": d_logits.sum(axis=0),
    })


# -- combinations -----------------------------------------------------------

def total_loss(l_vg: LossBundle, l_contrast: Optional[LossBundle],
               l_caption: Optional[LossBundle], weights: LossWeights) -> LossBundle:
    """``l_vg + lambda1 * l_contrast + lambda2 * l_caption``; missing terms count as zero."""
    parts = [l_vg]
    if l_contrast is not None:
        parts.append(l_contrast.scaled(weights.lambda1))
    if l_caption is not None:
        parts.append(l_caption.scaled(weights.lambda2))
    return LossBundle(float(sum(p.value for p in parts)), merge_grads(*(p.grads for p in parts)))


def gt_supervision_suite(batch: EmbeddingBatch, weights: LossWeights, decoder: DecoderParams,
                         sentences, cap_w=None, cap_b=None) -> LossBundle:
    """GT-clip contrastive plus GT-context caption loss, unweighted."""
    l_con = gt_clip_contrastive_loss(batch, weights)
    contexts = [make_caption_context(x, gt, ContextSource.GT_CONCAT, cap_w=cap_w, cap_b=cap_b)
                for x, gt in zip(batch.X, batch.gts)]
    l_cap = caption_loss(contexts, sentences, decoder)
    cap_grads = [caption_context_backward(c, l_cap.grads["w"][i], batch.X[i].shape[0])
                 for i, c in enumerate(contexts)]
    grads = {
        "X": [l_con.grads["X"][i] + cg["X"] for i, cg in enumerate(cap_grads)],
        "Y": l_con.grads["Y"],
        "dec_w": l_cap.grads["dec_w"],
        "dec_b": l_cap.grads["dec_b"],
    }
    if cap_w is not None:
        grads["cap_w"] = sum(cg["cap_w"] for cg in cap_grads)
        grads["cap_b"] = sum(cg["cap_b"] for cg in cap_grads)
    return LossBundle(l_con.value + l_cap.value, grads)
