"""Experiment configuration: a flat ``key = value`` file plus CLI overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .model import Mode
from .supportset import Construction, PoolingMethod

OUTPUT_ENV_VAR = "SSGROUNDING_OUT"
DEFAULT_OUTPUT_DIR = "runs"


class ConfigError(ValueError):
    """Malformed config file, unknown key or invalid value."""


@dataclass
class ExperimentConfig:
    # data: "synthetic" or a path to a JSONL manifest
    dataset: str = "synthetic"
    val_dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    n_train: int = 4000
    n_val: int = 200
    n_test: int = 400
    # synthetic world
    world_seed: int = 0
    T: int = 16
    n_entities: int = 24
    n_actions: int = 12
    entities_per_video: int = 2
    entity_presence: float = 0.8
    distractor_prob: float = 0.3
    noise_sigma: float = 0.1
    clip_duration_s: float = 1.0
    # optimisation
    batch_size: int = 32
    steps: int = 2000
    learning_rate: float = 1e-3
    plateau_patience: int = 100
    plateau_factor: float = 0.5
    val_every: int = 25
    eval_every: int = 0
    # objectives
    mode: str = "ss"
    use_contrast: bool = True
    use_caption: bool = True
    tau: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 0.1
    construction: str = "V-SS"
    pooling: str = "CA"
    kernel_width: int = 3
    # model
    D: int = 128
    D_v: int = 64
    D_l: int = 32
    t_max: int = 16
    vocab_size: Optional[int] = None
    normalize_embeddings: bool = True
    grounder_scale: float = 10.0
    min_iou: float = 0.5
    max_iou: float = 1.0
    # evaluation
    rank_n: tuple = (1, 5)
    rank_m: tuple = (0.5, 0.7)
    nms_threshold: float = 0.5
    recall_thresholds: tuple = (0.02, 0.04, 0.06)
    histogram_bins: int = 10
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ExperimentConfig":
        try:
            self.mode = Mode.parse(self.mode).value
            self.construction = Construction.parse(self.construction).value
            self.pooling = PoolingMethod.parse(self.pooling).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        for name in ("learning_rate", "tau", "clip_duration_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("lambda1", "lambda2", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if not 0 <= self.nms_threshold <= 1:
            raise ConfigError("nms_threshold must lie in [0, 1]")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must be >= 1")
        if any(n < 1 for n in self.rank_n) or any(not 0 < m <= 1 for m in self.rank_m):
            raise ConfigError("rank_n must be >= 1 and rank_m in (0, 1]")
        return self

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of every field."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw):
    """Convert a string (or already-typed value) to the type of field ``name``."""
    default = _FIELDS[name].default
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    if name in ("vocab_size", "val_dataset", "test_dataset") and text.lower() in ("", "none"):
        return None
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            cast = int if all(isinstance(v, int) for v in default) else float
            return tuple(cast(p) for p in text.split(",") if p.strip())
        if isinstance(default, int) or name == "vocab_size":
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Returns typed overrides."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """File values first, then ``overrides`` (``None`` entries are ignored)."""
    values = {}
    if path is not None:
        path = Path(path)
        values.update(parse_config_text(path.read_text(), str(path)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value)
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config_text`."""
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV_VAR, DEFAULT_OUTPUT_DIR))
