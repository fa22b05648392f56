"""Feature ingestion, manifests, prediction dumps, CSV tables and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import warnings
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .grounding import GroundingSample

FEATURE_DTYPE = np.dtype("<f4")
MANIFEST_KEYS = ("video_id", "T", "D_v", "features", "tokens", "gt", "clip_duration_s")
# fixed zip member timestamp so identical checkpoints are identical files
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class ManifestError(ValueError):
    """A manifest line or its feature file is malformed."""


class CheckpointError(ValueError):
    """A checkpoint file is missing, truncated or corrupt."""


class ConfigHashWarning(UserWarning):
    """A checkpoint was written under a different configuration."""


# -- features and manifests -------------------------------------------------

def write_features(path, features) -> None:
    """Raw float32 little-endian, row-major (T x D_v)."""
    np.ascontiguousarray(features, dtype=FEATURE_DTYPE).tofile(path)


def read_features(path, T: int, D_v: int, video_id: str = "?") -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{video_id}: feature file {path} not found")
    expected = T * D_v * FEATURE_DTYPE.itemsize
    size = path.stat().st_size
    if size != expected:
        raise ManifestError(f"{video_id}: feature file {path} has {size} bytes, "
                            f"expected T*D_v*4 = {expected}")
    return np.fromfile(path, dtype=FEATURE_DTYPE).reshape(T, D_v).astype(np.float64)


def _manifest_record(line: str, lineno: int, source) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{source}:{lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise ManifestError(f"{source}:{lineno}: expected a JSON object")
    vid = rec.get("video_id", f"line {lineno}")
    missing = [k for k in MANIFEST_KEYS if k not in rec]
    if missing:
        raise ManifestError(f"{vid}: missing keys {missing}")
    return rec


def ingest_features(manifest_path) -> list:
    """Read every manifest line into a :class:`GroundingSample`.

    Feature paths are resolved relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest {manifest_path} not found")
    samples = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = _manifest_record(line, lineno, manifest_path)
        vid = str(rec["video_id"])
        try:
            T, D_v = int(rec["T"]), int(rec["D_v"])
            gt = tuple(float(v) for v in rec["gt"])
            dur = float(rec["clip_duration_s"])
            tokens = np.asarray(rec["tokens"], dtype=np.int64)
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{vid}: bad field value ({exc})") from None
        if T < 1 or D_v < 1 or len(gt) != 2 or tokens.ndim != 1 or tokens.size == 0:
            raise ManifestError(f"{vid}: need T, D_v >= 1, gt = [start, end] and a token list")
        feat = Path(rec["features"])
        if not feat.is_absolute():
            feat = manifest_path.parent / feat
        F = read_features(feat, T, D_v, vid)
        try:
            samples.append(GroundingSample(vid, F, tokens, gt, dur))
        except ValueError as exc:
            raise ManifestError(str(exc)) from None
    if not samples:
        raise ManifestError(f"manifest {manifest_path} has no samples")
    return samples


def write_manifest(manifest_path, samples: Sequence[GroundingSample],
                   feature_dir: Optional[str] = None) -> Path:
    """Write feature files next to the manifest (or in ``feature_dir``) and the JSONL index."""
    manifest_path = Path(manifest_path)
    feature_dir = Path(feature_dir) if feature_dir else manifest_path.parent / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        fpath = feature_dir / f"{s.video_id}.f32"
        write_features(fpath, s.features)
        try:
            rel = fpath.relative_to(manifest_path.parent)
        except ValueError:
            rel = fpath.resolve()
        lines.append(json.dumps({
            "video_id": s.video_id, "T": s.T, "D_v": int(s.features.shape[1]),
            "features": str(rel), "tokens": [int(t) for t in s.tokens],
            "gt": list(s.gt_seconds), "clip_duration_s": s.clip_duration_s}))
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


# -- predictions and CSV ----------------------------------------------------

def write_predictions(path, samples: Sequence[GroundingSample], ranked: Sequence) -> None:
    with open(path, "w") as fh:
        for s, spans in zip(samples, ranked):
            fh.write(json.dumps({
                "video_id": s.video_id,
                "spans": [[float(a), float(b), float(c)] for a, b, c in spans],
                "gt": list(s.gt_seconds)}) + "\n")


def read_predictions(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # step, lr, scheduler, rng, spec, config hash
    perm: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def config_hash(self) -> Optional[str]:
        return self.meta.get("config_hash")

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Deterministic zip of ``.npy`` members plus a JSON metadata member."""
    path = Path(path)
    members = {"meta.json": json.dumps(ckpt.meta, sort_keys=True).encode()}
    for group, arrays in (("params", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for k in sorted(arrays):
            members[f"{group}/{k}.npy"] = _npy_bytes(arrays[k])
    members["perm.npy"] = _npy_bytes(np.asarray(ckpt.perm, dtype=np.int64))
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in members.items():
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_config_hash: Optional[str] = None) -> Checkpoint:
    """Inverse of :func:`save_checkpoint`; warns on a config-hash mismatch."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        with zipfile.ZipFile(path) as zf:
            bad = zf.testzip()
            if bad is not None:
                raise CheckpointError(f"checkpoint {path}: CRC mismatch in {bad}")
            meta = json.loads(zf.read("meta.json"))
            groups = {"params": {}, "adam_m": {}, "adam_v": {}}
            perm = np.zeros(0, dtype=np.int64)
            for name in zf.namelist():
                if not name.endswith(".npy"):
                    continue
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                if name == "perm.npy":
                    perm = arr
                else:
                    group, key = name[:-4].split("/", 1)
                    groups[group][key] = arr
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt: {exc}") from None
    if not groups["params"]:
        raise CheckpointError(f"checkpoint {path} holds no parameters")
    ckpt = Checkpoint(groups["params"], groups["adam_m"], groups["adam_v"], meta, perm)
    if expected_config_hash is not None and ckpt.config_hash != expected_config_hash:
        warnings.warn(f"checkpoint {path} was written with config hash {ckpt.config_hash}, "
                      f"current config hash is {expected_config_hash}", ConfigHashWarning,
                      stacklevel=2)
    return ckpt
