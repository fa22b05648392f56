"""Small stand-in encoders: affine projections into the shared space, a
bag-of-words text encoder and a unigram caption head."""

from __future__ import annotations

import numpy as np

from .numerics import normalize_rows, normalize_rows_backward


class OutOfVocabularyError(ValueError):
    pass


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(D_v: int, D_l: int, D: int, vocab_size: int,
                        rng: np.random.Generator) -> dict:
    """Projection, text-table, caption-transform and decoder arrays.

    Draw order is fixed; changing it changes every seeded run.
    """
    return {
        "psi_w": uniform_init(rng, (D_v, D), D_v),
        "psi_b": uniform_init(rng, (D,), D_v),
        "phi_w": uniform_init(rng, (D_l, D), D_l),
        "phi_b": uniform_init(rng, (D,), D_l),
        "token_table": uniform_init(rng, (vocab_size, D_l), 1),
        "cap_w": uniform_init(rng, (D, D), D),
        "cap_b": uniform_init(rng, (D,), D),
        "dec_w": uniform_init(rng, (D, vocab_size), D),
        "dec_b": uniform_init(rng, (vocab_size,), D),
    }


def check_tokens(tokens, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size < 1:
        raise ValueError("a token sequence needs at least one token")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise OutOfVocabularyError("token ids must be integers")
    bad = (tokens < 0) | (tokens >= vocab_size)
    if np.any(bad):
        raise OutOfVocabularyError(
            f"token id {int(tokens[bad][0])} outside vocabulary of size {vocab_size}")
    return tokens.astype(np.int64)


def _affine(M, W, b):
    M = np.asarray(M, dtype=np.float64)
    if M.shape[-1] != W.shape[0]:
        raise ValueError(f"input dimension {M.shape[-1]} does not match map input {W.shape[0]}")
    return M @ W + b


def project_video(F, W, b, normalize: bool = True):
    """Row-wise affine map of clip features; returns ``(X, cache)``."""
    H = _affine(F, W, b)
    if not normalize:
        return H, {"F": np.asarray(F, dtype=np.float64), "W": W, "norms": None, "out": H}
    X, norms = normalize_rows(H)
    return X, {"F": np.asarray(F, dtype=np.float64), "W": W, "norms": norms, "out": X}


def project_text(G, W, b, normalize: bool = True):
    """Single-vector version of :func:`project_video`."""
    Y, cache = project_video(np.atleast_2d(G), W, b, normalize)
    return Y[0], cache


def project_backward(dOut, cache):
    """Returns ``(dF, dW, db)`` for :func:`project_video` / :func:`project_text`."""
    dOut = np.atleast_2d(dOut)
    dH = dOut if cache["norms"] is None else normalize_rows_backward(dOut, cache["out"], cache["norms"])
    F = cache["F"]
    return dH @ cache["W"].T, F.T @ dH, dH.sum(axis=0)


def toy_text_encode(tokens, table) -> np.ndarray:
    """Mean of the token embedding rows (order-free)."""
    tokens = check_tokens(tokens, table.shape[0])
    return table[tokens].mean(axis=0)


def toy_text_encode_backward(dG, tokens, table_shape) -> np.ndarray:
    d_table = np.zeros(table_shape)
    np.add.at(d_table, tokens, np.asarray(dG)[None, :] / len(tokens))
    return d_table


def decode_token_logits(w, dec_w, dec_b) -> np.ndarray:
    return _affine(w, dec_w, dec_b)
