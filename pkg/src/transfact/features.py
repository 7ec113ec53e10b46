"""Per-frame feature extraction with a frozen seeded encoder.

The encoder average-pools each frame (or MHI map) to 16x16, flattens,
and applies a fixed random projection whose entries are N(0, 1/256),
drawn once from a PCG64 stream derived from (seed, modality). Features
are then standardized per dimension with statistics fitted on the
training split only. Nothing here is ever trained, which keeps feature
extraction deterministic across processes and platforms.

Feature files use the TFF1 format: magic ``TFF1``, u32 modality code,
u32 length, u32 dim, then float32 little-endian values. Raw MHI maps
reuse the same container with dim = H*W.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .rng import generator
from .videodata import VideoRecord

__all__ = [
    "POOL_SIZE",
    "MODALITIES",
    "FeatureSequence",
    "FeatureStats",
    "FrozenEncoder",
    "encode_frames",
    "encode_mhi",
    "save_features",
    "load_features",
]

POOL_SIZE = 16
MODALITIES = ("frame", "mhi")
FEATURE_MAGIC = b"TFF1"
_MODALITY_CODES = {"frame": 0, "mhi": 1}
_CODE_MODALITIES = {v: k for k, v in _MODALITY_CODES.items()}


@dataclass
class FeatureSequence:
    modality: str
    values: np.ndarray  # (T, D) float32

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError(f"feature values must be (T, D), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _pool_16(images: np.ndarray) -> np.ndarray:
    """Block-average a (T, H, W) stack to (T, 16, 16)."""
    T, H, W = images.shape
    if H % POOL_SIZE or W % POOL_SIZE:
        raise ShapeError(f"image size {H}x{W} is not a multiple of {POOL_SIZE}")
    bh, bw = H // POOL_SIZE, W // POOL_SIZE
    blocks = images.reshape(T, POOL_SIZE, bh, POOL_SIZE, bw).astype(np.float64)
    return blocks.mean(axis=(2, 4))


class FrozenEncoder:
    """Seeded random-projection encoder, one instance per (seed, modality, dim)."""

    def __init__(self, encoder_seed: int, dim: int, modality: str):
        if dim < 8:
            raise ConfigError(f"feature dim must be >= 8, got {dim}")
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}")
        self.dim = dim
        self.modality = modality
        rng = generator(encoder_seed, f"encoder:{modality}")
        # N(0, 1/256): variance matched to the 256 pooled inputs
        self.projection = rng.normal(0.0, 1.0 / 16.0, size=(POOL_SIZE * POOL_SIZE, dim))

    def encode(self, images: np.ndarray) -> FeatureSequence:
        """Raw (unstandardized) features for a (T, H, W) stack."""
        pooled = _pool_16(np.asarray(images))
        flat = pooled.reshape(pooled.shape[0], -1)
        return FeatureSequence(self.modality, flat @ self.projection)


@dataclass
class FeatureStats:
    """Per-dimension standardization statistics, fitted on one split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, sequences: list[FeatureSequence]) -> "FeatureStats":
        if not sequences:
            raise ConfigError("cannot fit statistics on zero sequences")
        stacked = np.concatenate([s.values.astype(np.float64) for s in sequences], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)  # constant dims pass through
        return cls(mean=mean, std=std)

    def apply(self, seq: FeatureSequence) -> FeatureSequence:
        if seq.dim != self.mean.shape[0]:
            raise ShapeError(f"stats were fit for dim {self.mean.shape[0]}, got {seq.dim}")
        values = (seq.values.astype(np.float64) - self.mean) / self.std
        return FeatureSequence(seq.modality, values)

    def save(self, path) -> None:
        payload = {"mean": self.mean.tolist(), "std": self.std.tolist()}
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FeatureStats":
        payload = json.loads(Path(path).read_text())
        return cls(
            mean=np.asarray(payload["mean"], dtype=np.float64),
            std=np.asarray(payload["std"], dtype=np.float64),
        )


def encode_frames(
    video: VideoRecord,
    encoder_seed: int,
    dim: int,
    stats: FeatureStats | None = None,
) -> FeatureSequence:
    """Feature sequence for the frame modality; standardized when stats given."""
    seq = FrozenEncoder(encoder_seed, dim, "frame").encode(video.frames)
    return stats.apply(seq) if stats is not None else seq


def encode_mhi(
    mhi_maps: np.ndarray,
    encoder_seed: int,
    dim: int,
    stats: FeatureStats | None = None,
) -> FeatureSequence:
    """Feature sequence for the MHI modality (distinct projection stream)."""
    seq = FrozenEncoder(encoder_seed, dim, "mhi").encode(mhi_maps)
    return stats.apply(seq) if stats is not None else seq


def save_features(path, seq: FeatureSequence) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", _MODALITY_CODES[seq.modality], seq.length, seq.dim))
        fh.write(np.ascontiguousarray(seq.values, dtype="<f4").tobytes())


def load_features(path, expect_dim: int | None = None) -> FeatureSequence:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise ParseError(f"{path}: truncated header", offset=len(blob))
    if blob[:4] != FEATURE_MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    code, length, dim = struct.unpack("<III", blob[4:16])
    if code not in _CODE_MODALITIES:
        raise ParseError(f"{path}: unknown modality code {code}", offset=4)
    expected = 16 + 4 * length * dim
    if len(blob) != expected:
        raise ParseError(
            f"{path}: expected {expected} bytes for {length}x{dim} float32, found {len(blob)}",
            offset=min(len(blob), expected),
        )
    values = np.frombuffer(blob, dtype="<f4", count=length * dim, offset=16).reshape(length, dim)
    seq = FeatureSequence(_CODE_MODALITIES[code], values.copy())
    if expect_dim is not None and seq.dim != expect_dim:
        raise ShapeError(f"{path}: feature dim {seq.dim} does not match configured {expect_dim}")
    return seq
