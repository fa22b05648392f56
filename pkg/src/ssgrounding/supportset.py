"""Support-set construction and the six pooling functions that map a support set
to one weighted video embedding, each with its backward pass."""

from __future__ import annotations

from functools import lru_cache
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .numerics import DegenerateInputError, normalize_rows, stable_softmax


class EmptySupportSetError(ValueError):
    """The requested construction leaves no clips to pool."""


class Construction(str, Enum):
    V_SS = "V-SS"
    GT_SS = "GT-SS"
    NON_GT_SS = "Non-GT-SS"

    @classmethod
    def parse(cls, value) -> "Construction":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown support-set construction {value!r}")


class PoolingMethod(str, Enum):
    CA = "CA"
    SA = "SA"
    FC = "FC"
    CONV = "Conv"
    MP = "MP"
    AP = "AP"

    @classmethod
    def parse(cls, value) -> "PoolingMethod":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown pooling method {value!r}")


@dataclass(frozen=True)
class GroundTruthInterval:
    """Inclusive clip-index interval."""

    start_clip: int
    end_clip: int

    def validate(self, T: int) -> "GroundTruthInterval":
        if not (0 <= self.start_clip <= self.end_clip < T):
            raise ValueError(f"interval [{self.start_clip}, {self.end_clip}] invalid for T={T}")
        return self

    @property
    def length(self) -> int:
        return self.end_clip - self.start_clip + 1

    def indices(self) -> np.ndarray:
        return np.arange(self.start_clip, self.end_clip + 1)


@dataclass(frozen=True)
class SupportSet:
    clip_indices: np.ndarray
    construction: Construction

    def __len__(self):
        return len(self.clip_indices)


@dataclass
class PooledEmbedding:
    w_bar: np.ndarray
    attention: Optional[np.ndarray] = None
    method: Optional[PoolingMethod] = None
    cache: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class SelfAttentionIntermediate:
    Q: np.ndarray
    z: np.ndarray

    @property
    def Z(self) -> frozenset:
        return frozenset(self.z.tolist())


@dataclass
class PoolingParams:
    method: PoolingMethod
    tau: float = 0.1
    t_max: int = 16
    fc_weight: Optional[np.ndarray] = None  # (t_max * D, D)
    fc_bias: Optional[np.ndarray] = None
    conv_kernel: Optional[np.ndarray] = None  # (width, D, D)
    conv_bias: Optional[np.ndarray] = None

    def arrays(self) -> dict:
        out = {}
        if self.method is PoolingMethod.FC:
            out = {"fc_weight": self.fc_weight, "fc_bias": self.fc_bias}
        elif self.method is PoolingMethod.CONV:
            out = {"conv_kernel": self.conv_kernel, "conv_bias": self.conv_bias}
        return out


def init_pooling_params(method, D: int, rng: np.random.Generator, tau: float = 0.1,
                        t_max: int = 16, kernel_width: int = 3) -> PoolingParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for the parametric poolers.

    Both FC and Conv arrays are always drawn so the generator advances the same
    way whichever method is selected.
    """
    method = PoolingMethod.parse(method)
    if kernel_width % 2 != 1:
        raise ValueError("conv kernel width must be odd for same-padding")
    bound = 1.0 / np.sqrt(t_max * D)
    fc_w = rng.uniform(-bound, bound, size=(t_max * D, D))
    fc_b = rng.uniform(-bound, bound, size=D)
    bound = 1.0 / np.sqrt(kernel_width * D)
    conv_k = rng.uniform(-bound, bound, size=(kernel_width, D, D))
    conv_b = rng.uniform(-bound, bound, size=D)
    params = PoolingParams(method=method, tau=tau, t_max=t_max)
    if method is PoolingMethod.FC:
        params.fc_weight, params.fc_bias = fc_w, fc_b
    elif method is PoolingMethod.CONV:
        params.conv_kernel, params.conv_bias = conv_k, conv_b
    return params


def build_support_set(T: int, gt: GroundTruthInterval, construction) -> SupportSet:
    construction = Construction.parse(construction)
    if T < 1:
        raise ValueError("a video needs at least one clip")
    gt.validate(T)
    if construction is Construction.V_SS:
        idx = np.arange(T)
    elif construction is Construction.GT_SS:
        idx = gt.indices()
    else:
        idx = np.setdiff1d(np.arange(T), gt.indices())
        if idx.size == 0:
            raise EmptySupportSetError(
                f"ground truth [{gt.start_clip}, {gt.end_clip}] covers all {T} clips; "
                "Non-GT support set would be empty")
    return SupportSet(clip_indices=idx, construction=construction)


def _as_clips(clips) -> np.ndarray:
    S = np.asarray(clips, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 1:
        raise ValueError("clips must be a non-empty (n_clips, D) array")
    return S


# -- attention poolers ------------------------------------------------------

def pool_cross_attention(clips, y, tau: float) -> PooledEmbedding:
    """Text-conditioned attention: softmax over cosine(x_t, y) / tau."""
    S = _as_clips(clips)
    y = np.asarray(y, dtype=np.float64)
    S_hat, s_norm = normalize_rows(S)
    y_norm = np.linalg.norm(y)
    if not y_norm > 0:
        raise DegenerateInputError("query embedding is a zero vector")
    y_hat = y / y_norm
    cos = S_hat @ y_hat
    a = stable_softmax(cos, tau)
    w = a @ S
    return PooledEmbedding(
        w_bar=w, attention=a, method=PoolingMethod.CA,
        cache={"S": S, "S_hat": S_hat, "s_norm": s_norm, "y_hat": y_hat,
               "y_norm": y_norm, "cos": cos, "tau": tau})


def self_attention_intermediate(clips, tau: float) -> SelfAttentionIntermediate:
    S = _as_clips(clips)
    Q = S @ S.T / tau
    return SelfAttentionIntermediate(Q=Q, z=Q.sum(axis=1))


def pool_self_attention(clips, tau: float) -> PooledEmbedding:
    """Video-only attention from the row sums of the clip similarity matrix."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    S = _as_clips(clips)
    m = S.sum(axis=0)
    # row sums of S S^T / tau without materializing the T x T matrix
    z = S @ m / tau
    a = stable_softmax(z, 1.0)
    return PooledEmbedding(w_bar=a @ S, attention=a, method=PoolingMethod.SA,
                           cache={"S": S, "m": m, "tau": tau})


# -- parametric poolers -----------------------------------------------------

def _pad_to(S: np.ndarray, t_max: int):
    n, D = S.shape
    used = min(n, t_max)
    padded = np.zeros((t_max, D))
    padded[:used] = S[:used]
    return padded, used


def pool_parametric(clips, params: PoolingParams) -> PooledEmbedding:
    S = _as_clips(clips)
    D = S.shape[1]
    if params.method is PoolingMethod.FC:
        W, b = params.fc_weight, params.fc_bias
        if W is None or W.shape != (params.t_max * D, b.shape[0]):
            raise ValueError(f"FC weight shape {None if W is None else W.shape} does not "
                             f"match t_max={params.t_max}, D={D}")
        padded, used = _pad_to(S, params.t_max)
        w = padded.reshape(-1) @ W + b
        return PooledEmbedding(w_bar=w, method=PoolingMethod.FC,
                               cache={"padded": padded, "used": used, "n": S.shape[0]})
    if params.method is PoolingMethod.CONV:
        K, b = params.conv_kernel, params.conv_bias
        if K is None or K.ndim != 3 or K.shape[1] != D:
            raise ValueError("conv kernel must have shape (width, D, D_out)")
        width = K.shape[0]
        half = width // 2
        padded, used = _pad_to(S, params.t_max)
        # only real clip rows feed the conv; padding rows are zero either way
        ext = np.zeros((used + 2 * half, D))
        ext[half:half + used] = padded[:used]
        out = np.zeros((used, K.shape[2])) + b
        for k in range(width):
            out += ext[k:k + used] @ K[k]
        w = out.mean(axis=0)
        return PooledEmbedding(w_bar=w, method=PoolingMethod.CONV,
                               cache={"ext": ext, "used": used, "n": S.shape[0]})
    raise ValueError(f"pool_parametric does not handle {params.method}")


def pool_reduce(clips, method) -> PooledEmbedding:
    method = PoolingMethod.parse(method)
    S = _as_clips(clips)
    if method is PoolingMethod.MP:
        arg = np.argmax(S, axis=0)
        return PooledEmbedding(w_bar=S[arg, np.arange(S.shape[1])], method=method,
                               cache={"argmax": arg, "n": S.shape[0]})
    if method is PoolingMethod.AP:
        return PooledEmbedding(w_bar=S.mean(axis=0), method=method, cache={"n": S.shape[0]})
    raise ValueError(f"pool_reduce does not handle {method}")


def pool(clips, y, params: PoolingParams) -> PooledEmbedding:
    """Dispatch on ``params.method``."""
    m = params.method
    if m is PoolingMethod.CA:
        return pool_cross_attention(clips, y, params.tau)
    if m is PoolingMethod.SA:
        return pool_self_attention(clips, params.tau)
    if m in (PoolingMethod.FC, PoolingMethod.CONV):
        return pool_parametric(clips, params)
    return pool_reduce(clips, m)


def pool_backward(pooled: PooledEmbedding, grad_w, params: Optional[PoolingParams] = None):
    """Back-propagate dL/dw_bar.

    Returns ``(d_clips, d_y, d_params)``; ``d_y`` is None unless the pooling is
    text-conditioned and ``d_params`` is empty for the parameter-free methods.
    """
    g = np.asarray(grad_w, dtype=np.float64)
    c = pooled.cache
    m = pooled.method
    if m is PoolingMethod.CA:
        S, S_hat, s_norm = c["S"], c["S_hat"], c["s_norm"]
        y_hat, y_norm, cos, tau = c["y_hat"], c["y_norm"], c["cos"], c["tau"]
        a = pooled.attention
        d_S = np.outer(a, g)
        da = S @ g
        d_cos = a * (da - a @ da) / tau
        d_S += d_cos[:, None] * (y_hat[None, :] - cos[:, None] * S_hat) / s_norm
        d_y = (d_cos @ S_hat - (d_cos @ cos) * y_hat) / y_norm
        return d_S, d_y, {}
    if m is PoolingMethod.SA:
        S, mvec, tau = c["S"], c["m"], c["tau"]
        a = pooled.attention
        d_S = np.outer(a, g)
        da = S @ g
        dz = a * (da - a @ da)
        d_S += np.outer(dz, mvec) / tau + (dz @ S)[None, :] / tau
        return d_S, None, {}
    if m is PoolingMethod.FC:
        padded, used, n = c["padded"], c["used"], c["n"]
        W = params.fc_weight
        d_flat = W @ g
        d_S = np.zeros((n, padded.shape[1]))
        d_S[:used] = d_flat.reshape(padded.shape)[:used]
        return d_S, None, {"fc_weight": np.outer(padded.reshape(-1), g), "fc_bias": g.copy()}
    if m is PoolingMethod.CONV:
        ext, used, n = c["ext"], c["used"], c["n"]
        K = params.conv_kernel
        width = K.shape[0]
        half = width // 2
        d_out = np.broadcast_to(g / used, (used, g.shape[0]))
        d_ext = np.zeros_like(ext)
        dK = np.empty_like(K)
        for k in range(width):
            dK[k] = ext[k:k + used].T @ d_out
            d_ext[k:k + used] += d_out @ K[k].T
        d_S = np.zeros((n, ext.shape[1]))
        d_S[:used] = d_ext[half:half + used]
        return d_S, None, {"conv_kernel": dK, "conv_bias": g.copy()}
    if m is PoolingMethod.MP:
        arg, n = c["argmax"], c["n"]
        d_S = np.zeros((n, g.shape[0]))
        d_S[arg, np.arange(g.shape[0])] = g
        return d_S, None, {}
    if m is PoolingMethod.AP:
        n = c["n"]
        return np.broadcast_to(g / n, (n, g.shape[0])).copy(), None, {}
    raise ValueError(f"no backward for pooling method {m}")


# -- batched (padded + masked) pooling ---------------------------------------

def gather_support(X_list, gts, construction):
    """Pad every item's support set to a common length.

    Returns ``(S3, mask, flat_idx)``: ``S3`` is (B, L, D), ``mask`` marks real
    rows and ``flat_idx`` indexes rows of ``np.concatenate(X_list)``.
    """
    lengths = tuple(x.shape[0] for x in X_list)
    mask, flat_idx = _support_layout(lengths, tuple(gts), Construction.parse(construction))
    C = np.concatenate(X_list, axis=0)
    return C[flat_idx], mask, flat_idx


@lru_cache(maxsize=4096)
def _support_layout(lengths: tuple, gts: tuple, construction: "Construction"):
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)
    supports = [build_support_set(T, gt, construction).clip_indices for T, gt in zip(lengths, gts)]
    L = max(len(s) for s in supports)
    B = len(lengths)
    mask = np.zeros((B, L), dtype=bool)
    flat_idx = np.zeros((B, L), dtype=int)
    for b, s in enumerate(supports):
        mask[b, :len(s)] = True
        flat_idx[b, :len(s)] = offsets[b] + s
        flat_idx[b, len(s):] = offsets[b] + s[0]
    mask.setflags(write=False)
    flat_idx.setflags(write=False)
    return mask, flat_idx


def _masked_softmax(z, mask):
    z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def pool_padded(S3, mask, Y, params: PoolingParams):
    """Batched equivalent of :func:`pool` for all six methods. Returns ``(W, cache)``."""
    m = params.method
    B, L, D = S3.shape
    S3 = np.where(mask[:, :, None], S3, 0.0) if m is not PoolingMethod.CA else S3
    count = mask.sum(axis=1)
    cache = {"S3": S3, "mask": mask, "count": count, "method": m}
    if m is PoolingMethod.CA:
        s_norm = np.linalg.norm(S3, axis=2, keepdims=True)
        S_hat = S3 / s_norm
        y_norm = np.linalg.norm(Y, axis=1, keepdims=True)
        y_hat = Y / y_norm
        cos = np.einsum("bld,bd->bl", S_hat, y_hat)
        a = _masked_softmax(cos / params.tau, mask)
        cache.update(S_hat=S_hat, s_norm=s_norm, y_hat=y_hat, y_norm=y_norm, cos=cos, a=a,
                     tau=params.tau)
        return np.einsum("bl,bld->bd", a, S3), cache
    if m is PoolingMethod.SA:
        msum = S3.sum(axis=1)
        z = np.einsum("bld,bd->bl", S3, msum) / params.tau
        a = _masked_softmax(z, mask)
        cache.update(m=msum, a=a, tau=params.tau)
        return np.einsum("bl,bld->bd", a, S3), cache
    if m is PoolingMethod.AP:
        return S3.sum(axis=1) / count[:, None], cache
    if m is PoolingMethod.MP:
        masked = np.where(mask[:, :, None], S3, -np.inf)
        arg = masked.argmax(axis=1)
        cache["argmax"] = arg
        return np.take_along_axis(S3, arg[:, None, :], axis=1)[:, 0, :], cache
    t_max = params.t_max
    used = np.minimum(count, t_max)
    padded = np.zeros((B, t_max, D))
    keep = min(L, t_max)
    padded[:, :keep] = S3[:, :keep]
    cache.update(padded=padded, used=used, keep=keep)
    if m is PoolingMethod.FC:
        return padded.reshape(B, -1) @ params.fc_weight + params.fc_bias, cache
    if m is PoolingMethod.CONV:
        K = params.conv_kernel
        half = K.shape[0] // 2
        ext = np.zeros((B, t_max + 2 * half, D))
        ext[:, half:half + t_max] = padded
        out = np.zeros((B, t_max, K.shape[2])) + params.conv_bias
        for k in range(K.shape[0]):
            out += ext[:, k:k + t_max] @ K[k]
        pos_mask = np.arange(t_max)[None, :] < used[:, None]
        cache.update(ext=ext, pos_mask=pos_mask)
        return np.einsum("bt,btd->bd", pos_mask / used[:, None], out), cache
    raise ValueError(f"unknown pooling method {m}")


def pool_padded_backward(dW, cache, params: PoolingParams):
    """Returns ``(dS3, dY or None, d_params)``; padded rows of ``dS3`` are zero."""
    m = cache["method"]
    S3, mask = cache["S3"], cache["mask"]
    if m is PoolingMethod.CA:
        a, tau = cache["a"], cache["tau"]
        S_hat, s_norm, y_hat, y_norm, cos = (cache[k] for k in ("S_hat", "s_norm", "y_hat", "y_norm", "cos"))
        dS = a[:, :, None] * dW[:, None, :]
        da = np.einsum("bld,bd->bl", S3, dW)
        dcos = a * (da - np.sum(a * da, axis=1, keepdims=True)) / tau
        dS += dcos[:, :, None] * (y_hat[:, None, :] - cos[:, :, None] * S_hat) / s_norm
        dY = (np.einsum("bl,bld->bd", dcos, S_hat)
              - np.sum(dcos * cos, axis=1, keepdims=True) * y_hat) / y_norm
        return np.where(mask[:, :, None], dS, 0.0), dY, {}
    if m is PoolingMethod.SA:
        a, msum, tau = cache["a"], cache["m"], cache["tau"]
        dS = a[:, :, None] * dW[:, None, :]
        da = np.einsum("bld,bd->bl", S3, dW)
        dz = a * (da - np.sum(a * da, axis=1, keepdims=True))
        dS += dz[:, :, None] * msum[:, None, :] / tau
        dS += np.einsum("bl,bld->bd", dz, S3)[:, None, :] / tau
        return np.where(mask[:, :, None], dS, 0.0), None, {}
    if m is PoolingMethod.AP:
        dS = np.broadcast_to((dW / cache["count"][:, None])[:, None, :], S3.shape)
        return np.where(mask[:, :, None], dS, 0.0), None, {}
    if m is PoolingMethod.MP:
        dS = np.zeros_like(S3)
        np.put_along_axis(dS, cache["argmax"][:, None, :], dW[:, None, :], axis=1)
        return dS, None, {}
    padded, used, keep = cache["padded"], cache["used"], cache["keep"]
    B, t_max, D = padded.shape
    dS = np.zeros_like(S3)
    if m is PoolingMethod.FC:
        d_flat = dW @ params.fc_weight.T
        dS[:, :keep] = d_flat.reshape(B, t_max, D)[:, :keep]
        d_par = {"fc_weight": padded.reshape(B, -1).T @ dW, "fc_bias": dW.sum(axis=0)}
    else:
        K = params.conv_kernel
        half = K.shape[0] // 2
        ext, pos_mask = cache["ext"], cache["pos_mask"]
        d_out = (pos_mask / used[:, None])[:, :, None] * dW[:, None, :]
        d_ext = np.zeros_like(ext)
        dK = np.empty_like(K)
        for k in range(K.shape[0]):
            dK[k] = np.einsum("btd,bte->de", ext[:, k:k + t_max], d_out)
            d_ext[:, k:k + t_max] += d_out @ K[k].T
        dS[:, :keep] = d_ext[:, half:half + t_max][:, :keep]
        d_par = {"conv_kernel": dK, "conv_bias": dW.sum(axis=0)}
    return np.where(mask[:, :, None], dS, 0.0), None, d_par
