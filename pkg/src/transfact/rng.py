"""Deterministic seed derivation.

One user-facing seed fans out into independent streams (data generation,
encoder projections, weight init, shuffling, ...) via SHA-256 of the
seed and a purpose string. The generator everywhere is numpy's PCG64,
which has a stable, documented stream across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "generator"]


def derive_seed(seed: int, purpose: str) -> int:
    """Derive a 63-bit sub-seed for ``purpose`` from a master seed."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def generator(seed: int, purpose: str | None = None) -> np.random.Generator:
    """PCG64 generator, optionally on a purpose-specific derived stream."""
    if purpose is not None:
        seed = derive_seed(seed, purpose)
    return np.random.Generator(np.random.PCG64(seed))
