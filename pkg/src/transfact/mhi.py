"""Motion History Images over grayscale frame sequences.

A motion mask marks pixels whose absolute intensity change between two
consecutive frames exceeds a threshold ``theta`` (strictly). The MHI map
holds, per pixel, a counter that is reset to ``tau`` on motion and decays
by one per frame otherwise, floored at zero. All arithmetic is integer.

A video of T frames yields T maps: the recurrence only defines maps for
t = 1..T-1, so an all-zero map is prepended at t = 0 to keep the MHI
sequence aligned 1:1 with the frames (downstream fusion needs that).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, InsufficientInputError, ShapeError

__all__ = [
    "DEFAULT_TAU",
    "DEFAULT_THETA",
    "motion_mask",
    "update_mhi",
    "compute_mhi_sequence",
    "write_pgm",
]

DEFAULT_TAU = 15
DEFAULT_THETA = 20


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")


def motion_mask(prev: np.ndarray, curr: np.ndarray, theta: int = DEFAULT_THETA) -> np.ndarray:
    """Binary change mask: 1 where |curr - prev| > theta, else 0.

    Frames are (H, W) integer intensity arrays in [0, 255]. The comparison
    is strict, so a difference exactly equal to ``theta`` yields 0.
    """
    _check_same_shape(prev, curr)
    if theta < 0:
        raise ConfigError(f"theta must be >= 0, got {theta}")
    # widen before subtracting so uint8 inputs cannot wrap around
    diff = np.abs(prev.astype(np.int32) - curr.astype(np.int32))
    return (diff > theta).astype(np.int32)


def update_mhi(prev_h: np.ndarray, mask: np.ndarray, tau: int = DEFAULT_TAU) -> np.ndarray:
    """One recurrence step: tau where the mask fires, max(0, h-1) elsewhere."""
    _check_same_shape(prev_h, mask)
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    decayed = np.maximum(prev_h.astype(np.int32) - 1, 0)
    return np.where(mask != 0, np.int32(tau), decayed)


def compute_mhi_sequence(
    frames: np.ndarray,
    tau: int = DEFAULT_TAU,
    theta: int = DEFAULT_THETA,
) -> np.ndarray:
    """MHI maps for a whole video, one per frame.

    ``frames`` is (T, H, W); the result is (T, H, W) int32 with maps in
    [0, tau] and an all-zero map at t = 0. Folding ``update_mhi`` over the
    per-step masks yields exactly the same values (streaming and batch
    paths share this code).
    """
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise InsufficientInputError(
            f"need a (T>=2, H, W) frame stack, got shape {frames.shape}"
        )
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    maps = np.zeros(frames.shape, dtype=np.int32)
    for t in range(1, frames.shape[0]):
        mask = motion_mask(frames[t - 1], frames[t], theta)
        maps[t] = update_mhi(maps[t - 1], mask, tau)
    return maps


def write_pgm(path, mhi_map: np.ndarray, tau: int) -> None:
    """Export one MHI map as binary 8-bit PGM, values scaled by 255/tau."""
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    scaled = np.rint(mhi_map.astype(np.float64) * (255.0 / tau)).astype(np.uint8)
    h, w = scaled.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())
