"""Embedding files, run configuration and manifests.

Embedding file layout (little-endian)::

    bytes 0-3    magic b"GFV1"
    bytes 4-7    u32 dim d
    bytes 8-15   u64 count n (rows, or pairs when paired)
    byte  16     u8 paired flag (0 or 1)
    then         float32 payload, row-major; paired files interleave
                 (image row, text row) so each pair takes 2d floats
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import warnings
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, DataError
from .net import NetConfig
from .runtime import SolverConfig
from .train import TrainConfig, _build

EMB_MAGIC = b"GFV1"
_HEADER = struct.Struct("<4sIQB")
RENORM_TOL = 1e-4
WARN_TOL = 1e-3


@dataclass
class Embeddings:
    images: np.ndarray
    texts: np.ndarray | None = None

    @property
    def paired(self) -> bool:
        return self.texts is not None

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def __len__(self) -> int:
        return self.images.shape[0]

    def pairs(self) -> np.ndarray:
        """(n, 2d) float64 product points."""
        if not self.paired:
            raise DataError("file is not paired")
        return np.concatenate([self.images, self.texts], axis=1).astype(np.float64)


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def write_embeddings(path, images, texts=None):
    img = np.ascontiguousarray(images, dtype="<f4")
    if img.ndim != 2:
        raise DataError("embeddings must be a 2-D array")
    n, d = img.shape
    if texts is not None:
        txt = np.ascontiguousarray(texts, dtype="<f4")
        if txt.shape != img.shape:
            raise DataError(f"image/text shapes differ: {img.shape} vs {txt.shape}")
        payload = np.stack([img, txt], axis=1).tobytes()
    else:
        payload = img.tobytes()
    atomic_write_bytes(path, _HEADER.pack(EMB_MAGIC, d, n, int(texts is not None)) + payload)


def _renormalize(rows: np.ndarray, path) -> np.ndarray:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    if np.any(norms == 0):
        raise DataError(f"{path}: zero-norm row {int(np.argmin(norms))}")
    dev = np.abs(norms - 1.0)
    if np.any(dev > WARN_TOL):
        warnings.warn(f"{path}: {int((dev > WARN_TOL).sum())} rows deviate from unit norm by more than {WARN_TOL}")
    fix = dev > RENORM_TOL
    if np.any(fix):
        rows = rows.copy()
        rows[fix] = (rows[fix] / norms[fix, None]).astype(rows.dtype)
    return rows


def read_embeddings(path, expect_dim: int | None = None, renormalize: bool = True) -> Embeddings:
    """Read an embedding file; rows off the sphere by more than 1e-4 are renormalised."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: file too short for header")
    magic, d, n, paired = _HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if paired not in (0, 1):
        raise DataError(f"{path}: invalid paired flag {paired}")
    if d == 0:
        raise DataError(f"{path}: zero dimension")
    if expect_dim is not None and d != expect_dim:
        raise DataError(f"{path}: dimension {d} does not match expected {expect_dim}")
    width = d * (2 if paired else 1)
    expected = _HEADER.size + 4 * n * width
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, header implies {expected - _HEADER.size}")
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, width)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values")
    img, txt = (arr[:, :d], arr[:, d:]) if paired else (arr, None)
    if renormalize and n:
        img = _renormalize(img, path)
        txt = _renormalize(txt, path) if txt is not None else None
    return Embeddings(np.array(img), None if txt is None else np.array(txt))


def convert_text(src, dst, paired: bool = False, delimiter=None):
    """Convert a whitespace- or comma-separated dump (one row per line) to the binary format.

    For paired files each line holds the image vector followed by the text vector.
    """
    try:
        arr = np.loadtxt(src, delimiter=delimiter, ndmin=2, comments="#")
    except ValueError as exc:
        raise DataError(f"{src}: {exc}") from exc
    if paired:
        if arr.shape[1] % 2:
            raise DataError(f"{src}: paired rows need an even number of columns")
        d = arr.shape[1] // 2
        write_embeddings(dst, arr[:, :d], arr[:, d:])
    else:
        write_embeddings(dst, arr)
    return arr.shape[0]


@dataclass
class RetrievalConfig:
    n_samples: int = 50
    kappa: float = 100.0

    def __post_init__(self):
        if self.n_samples < 1 or self.kappa < 0:
            raise ConfigError("retrieval needs n_samples >= 1 and kappa >= 0")


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    solver: SolverConfig = field(default_factory=SolverConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    geometry: str = "riemannian"

    def __post_init__(self):
        if self.geometry not in ("riemannian", "euclidean"):
            raise ConfigError(f"geometry must be riemannian or euclidean, got {self.geometry!r}")

    def to_dict(self) -> dict:
        return {"net": asdict(self.net), "train": self.train.to_dict(), "solver": asdict(self.solver),
                "retrieval": asdict(self.retrieval), "geometry": self.geometry}

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def parse_config(data: dict | None) -> RunConfig:
    data = dict(data or {})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    train_defaults = TrainConfig.desk().to_dict()
    train_section = data.get("train") or {}
    if not isinstance(train_section, dict):
        raise ConfigError("train: expected a mapping")
    for key in ("curriculum", "validation"):
        if isinstance(train_section.get(key), dict):
            train_section = {**train_section, key: {**train_defaults[key], **train_section[key]}}
    try:
        return RunConfig(
            net=_build(NetConfig, data.get("net") or {}, "net"),
            train=_build(TrainConfig, {**train_defaults, **train_section}, "train"),
            solver=_build(SolverConfig, data.get("solver") or {}, "solver"),
            retrieval=_build(RetrievalConfig, data.get("retrieval") or {}, "retrieval"),
            geometry=data.get("geometry", "riemannian"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path=None) -> RunConfig:
    """Read a YAML (or JSON) run config; missing sections take desk defaults."""
    if path is None:
        return parse_config({})
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    command: str
    checkpoint: str | None = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    rng: str = "numpy SeedSequence rooted at seed; per-query/per-sample streams keyed by index"
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: str | None = None

    def header_comment(self, manifest_path) -> str:
        return f"manifest={Path(manifest_path).name} config_hash={self.config_hash} seed={self.seed}"

    def write(self, path):
        self.finished = datetime.now(timezone.utc).isoformat()
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
