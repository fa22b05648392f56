"""Whole-model forward/backward: raw features and tokens in, parameter gradients out."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .encoders import check_tokens, init_encoder_params, project_backward, project_video
from .grounding import GROUNDER_SCALE, batch_grounding_loss, init_grounder_params
from .numerics import normalize_rows, normalize_rows_backward
from .objectives import (
    DecoderParams,
    EmbeddingBatch,
    LossBundle,
    LossWeights,
    caption_loss,
    gt_clip_contrastive_loss,
    normalize_pooled,
    normalize_pooled_backward,
    support_contrastive_terms,
)
from .supportset import (
    Construction,
    PoolingMethod,
    PoolingParams,
    gather_support,
    init_pooling_params,
    pool_padded,
    pool_padded_backward,
)

ENCODER_KEYS = ("psi_w", "psi_b", "phi_w", "phi_b", "token_table")
GROUNDER_KEYS = ("grd_in", "grd_out", "grd_b")
CAPTION_KEYS = ("cap_w", "cap_b", "dec_w", "dec_b")
POOLING_KEYS = ("fc_weight", "fc_bias", "conv_kernel", "conv_bias")


class Mode(str, Enum):
    BASELINE = "baseline"
    GTC = "gtc"
    SS = "ss"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())


@dataclass
class ModelSpec:
    D: int = 128
    D_v: int = 64
    D_l: int = 32
    vocab_size: int = 36
    t_max: int = 16
    mode: Mode = Mode.SS
    construction: Construction = Construction.V_SS
    pooling: PoolingMethod = PoolingMethod.CA
    kernel_width: int = 3
    use_contrast: bool = True
    use_caption: bool = True
    normalize: bool = True
    tau: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 0.1
    min_iou: float = 0.5
    max_iou: float = 1.0
    grounder_scale: float = GROUNDER_SCALE
    # off only to isolate auxiliary terms in diagnostics; training always keeps L^vg
    use_grounding: bool = True

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        self.construction = Construction.parse(self.construction)
        self.pooling = PoolingMethod.parse(self.pooling)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.tau)


def init_params(spec: ModelSpec, seed: int) -> dict:
    """All trainable arrays, drawn in a fixed order independent of mode."""
    rng = np.random.default_rng([seed, 7])
    params = init_encoder_params(spec.D_v, spec.D_l, spec.D, spec.vocab_size, rng)
    params.update(init_grounder_params(spec.D, rng))
    pp = init_pooling_params(PoolingMethod.FC, spec.D, rng, spec.tau, spec.t_max, spec.kernel_width)
    params["fc_weight"], params["fc_bias"] = pp.fc_weight, pp.fc_bias
    rng2 = np.random.default_rng([seed, 8])
    pp = init_pooling_params(PoolingMethod.CONV, spec.D, rng2, spec.tau, spec.t_max, spec.kernel_width)
    params["conv_kernel"], params["conv_bias"] = pp.conv_kernel, pp.conv_bias
    return params


def pooling_params(spec: ModelSpec, params: dict) -> PoolingParams:
    return PoolingParams(
        method=spec.pooling, tau=spec.tau, t_max=spec.t_max,
        fc_weight=params.get("fc_weight"), fc_bias=params.get("fc_bias"),
        conv_kernel=params.get("conv_kernel"), conv_bias=params.get("conv_bias"))


def active_keys(spec: ModelSpec) -> tuple:
    """Parameter names that can receive gradient under the model spec's mode and toggles."""
    keys = ENCODER_KEYS + (GROUNDER_KEYS if spec.use_grounding else ())
    if spec.mode is Mode.BASELINE:
        return keys
    if spec.use_caption:
        keys += ("dec_w", "dec_b")
        if spec.mode is Mode.GTC:
            keys += ("cap_w", "cap_b")
    if spec.mode is Mode.SS:
        if spec.pooling is PoolingMethod.FC:
            keys += ("fc_weight", "fc_bias")
        elif spec.pooling is PoolingMethod.CONV:
            keys += ("conv_kernel", "conv_bias")
    return keys


def token_bags(samples: Sequence, vocab_size: int) -> np.ndarray:
    """(B, V) matrix whose row i averages the one-hot tokens of sample i."""
    lengths = np.array([len(s.tokens) for s in samples])
    toks = check_tokens(np.concatenate([s.tokens for s in samples]), vocab_size)
    rows = np.repeat(np.arange(len(samples)), lengths)
    bags = np.zeros((len(samples), vocab_size))
    np.add.at(bags, (rows, toks), 1.0 / lengths[rows])
    return bags


def encode(params: dict, samples: Sequence, normalize: bool = True):
    """Project every sample into the shared space. Returns ``(X_list, Y, cache)``."""
    lengths = [s.T for s in samples]
    F = np.concatenate([s.features for s in samples], axis=0)
    X_all, vcache = project_video(F, params["psi_w"], params["psi_b"], normalize)
    X_list = np.split(X_all, np.cumsum(lengths)[:-1])
    bags = token_bags(samples, params["token_table"].shape[0])
    G = bags @ params["token_table"]
    U = G @ params["phi_w"] + params["phi_b"]
    if normalize:
        Y, norms = normalize_rows(U)
    else:
        Y, norms = U, None
    cache = {"vcache": vcache, "G": G, "Y": Y, "norms": norms, "lengths": lengths, "bags": bags}
    return X_list, Y, cache


def encode_backward(dX_list, dY, params: dict, cache: dict) -> dict:
    _, d_psi_w, d_psi_b = project_backward(np.concatenate(dX_list, axis=0), cache["vcache"])
    dU = dY if cache["norms"] is None else normalize_rows_backward(dY, cache["Y"], cache["norms"])
    dG = dU @ params["phi_w"].T
    d_table = cache["bags"].T @ dG
    return {"psi_w": d_psi_w, "psi_b": d_psi_b, "phi_w": cache["G"].T @ dU,
            "phi_b": dU.sum(axis=0), "token_table": d_table}


def loss_and_grads(params: dict, samples: Sequence, spec: ModelSpec, with_grads: bool = True):
    """Combined objective on one batch.

    Returns ``(bundle, components)`` where ``bundle.grads`` is keyed by parameter
    name (only the keys of :func:`active_keys`) and ``components`` holds the
    unweighted value of each term.
    """
    X_list, Y, ecache = encode(params, samples, spec.normalize)
    gts = [s.gt for s in samples]
    sentences = [s.tokens for s in samples]
    value, components, grads = head_loss_and_grads(
        X_list, Y, gts, sentences, ecache["bags"], params, spec, with_grads)
    if not with_grads:
        return LossBundle(value, {}), components
    dX, dY = grads.pop("X"), grads.pop("Y")
    grads.update(encode_backward(dX, dY, params, ecache))
    return LossBundle(value, grads), components


def head_loss_and_grads(X_list, Y, gts, sentences, bags, params: dict, spec: ModelSpec,
                        with_grads: bool = True):
    """Everything after the encoders: L^vg plus the mode's auxiliary terms.

    Returns ``(total, components, grads)``; ``grads`` holds ``"X"`` (list),
    ``"Y"`` and the grounder, caption and pooling parameter gradients.
    """
    w = spec.weights
    dX = [np.zeros_like(x) for x in X_list]
    dY = np.zeros_like(Y)
    grads, components, total = {}, {}, 0.0
    if spec.use_grounding:
        vg = batch_grounding_loss(X_list, Y, gts, params, spec.min_iou, spec.max_iou,
                                  spec.grounder_scale, with_grads)
        components["vg"] = total = vg.value
        if with_grads:
            dX, dY = vg.grads["X"], vg.grads["Y"]
            grads = {k: vg.grads[k] for k in GROUNDER_KEYS}

    if spec.mode is not Mode.BASELINE and (spec.use_contrast or spec.use_caption):
        batch = EmbeddingBatch(X_list, Y, gts)
        decoder = DecoderParams(params["dec_w"], params["dec_b"])
        if spec.mode is Mode.GTC:
            if spec.use_contrast:
                con = gt_clip_contrastive_loss(batch, w)
                components["contrast"] = con.value
                total += w.lambda1 * con.value
                dX = [a + w.lambda1 * b for a, b in zip(dX, con.grads["X"])]
                dY = dY + w.lambda1 * con.grads["Y"]
            if spec.use_caption:
                means = np.stack([x[gt.start_clip:gt.end_clip + 1].mean(axis=0)
                                  for x, gt in zip(X_list, gts)])
                ctx = means @ params["cap_w"] + params["cap_b"]
                cap = caption_loss(ctx, sentences, decoder, bags)
                components["caption"] = cap.value
                total += w.lambda2 * cap.value
                d_ctx = w.lambda2 * cap.grads["w"]
                d_means = d_ctx @ params["cap_w"].T
                dX = [a.copy() for a in dX]
                for i, gt in enumerate(gts):
                    dX[i][gt.start_clip:gt.end_clip + 1] += d_means[i] / gt.length
                grads["cap_w"] = means.T @ d_ctx
                grads["cap_b"] = d_ctx.sum(axis=0)
                grads["dec_w"] = w.lambda2 * cap.grads["dec_w"]
                grads["dec_b"] = w.lambda2 * cap.grads["dec_b"]
        else:
            pparams = pooling_params(spec, params)
            S3, mask, flat_idx = gather_support(X_list, gts, spec.construction)
            W_raw, pcache = pool_padded(S3, mask, Y, pparams)
            d_wbar = np.zeros_like(W_raw)
            if spec.use_contrast:
                value, dw, dy = support_contrastive_terms(W_raw, Y, w.tau, spec.normalize)
                components["contrast"] = value
                total += w.lambda1 * value
                d_wbar += w.lambda1 * dw
                dY = dY + w.lambda1 * dy
            if spec.use_caption:
                ctx, ncache = normalize_pooled(W_raw, spec.normalize)
                cap = caption_loss(ctx, sentences, decoder, bags)
                components["caption"] = cap.value
                total += w.lambda2 * cap.value
                d_wbar += normalize_pooled_backward(w.lambda2 * cap.grads["w"], ncache)
                grads["dec_w"] = w.lambda2 * cap.grads["dec_w"]
                grads["dec_b"] = w.lambda2 * cap.grads["dec_b"]
            if with_grads:
                dS3, dy, d_par = pool_padded_backward(d_wbar, pcache, pparams)
                dC = np.concatenate(dX, axis=0)
                # support indices are unique, so plain fancy-index accumulation is safe
                dC[flat_idx[mask]] += dS3[mask]
                dX = np.split(dC, np.cumsum([x.shape[0] for x in X_list])[:-1])
                if dy is not None:
                    dY = dY + dy
                grads.update(d_par)

    components["total"] = total
    grads["X"] = dX
    grads["Y"] = dY
    return total, components, grads


def pooled_video_embeddings(params: dict, samples: Sequence, spec: ModelSpec):
    """Support-pooled (renormalized) video vectors and text vectors, one row per sample."""
    X_list, Y, _ = encode(params, samples, spec.normalize)
    S3, mask, _ = gather_support(X_list, [s.gt for s in samples], spec.construction)
    W, _ = pool_padded(S3, mask, Y, pooling_params(spec, params))
    W, _ = normalize_pooled(W, spec.normalize)
    return W, Y
