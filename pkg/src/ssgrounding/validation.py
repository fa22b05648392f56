"""Input validation for the estimator API."""

from __future__ import annotations

import numpy as np

from .grounding import GroundingSample


def check_samples(samples, D_v=None, vocab_size=None, name: str = "samples") -> list:
    """Return ``samples`` as a list after checking type, feature width and token range."""
    if isinstance(samples, GroundingSample):
        raise TypeError(f"{name} must be a sequence of GroundingSample, not a single sample")
    samples = list(samples)
    if not samples:
        raise ValueError(f"{name} is empty")
    for s in samples:
        if not isinstance(s, GroundingSample):
            raise TypeError(f"{name} must contain GroundingSample objects, got {type(s).__name__}")
        if not np.all(np.isfinite(s.features)):
            raise ValueError(f"{s.video_id}: non-finite clip features")
    widths = {s.features.shape[1] for s in samples}
    if len(widths) != 1:
        raise ValueError(f"{name}: inconsistent feature widths {sorted(widths)}")
    if D_v is not None and widths != {D_v}:
        raise ValueError(f"{name}: expected feature width {D_v}, got {widths.pop()}")
    if vocab_size is not None:
        top = max(int(s.tokens.max()) for s in samples)
        if top >= vocab_size or min(int(s.tokens.min()) for s in samples) < 0:
            raise ValueError(f"{name}: token ids outside vocabulary of size {vocab_size}")
    return samples


def check_positive(value, name: str, strict: bool = True):
    if strict and not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    if not strict and not value >= 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return value
