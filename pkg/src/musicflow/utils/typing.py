from __future__ import annotations

from typing import TYPE_CHECKING, Protocol

import numpy as np
from numpy.typing import NDArray

__all__ = ["TYPE_CHECKING", "FieldFn", "FloatArray", "IntArray", "SeedLike", "Waveform", "as_rng"]

FloatArray = NDArray[np.floating]
IntArray = NDArray[np.integer]
Waveform = NDArray[np.floating]
SeedLike = int | np.random.Generator


class FieldFn(Protocol):
    """Right-hand side of dz/dt = f(t, z)."""

    def __call__(self, t: float, z: FloatArray, /) -> FloatArray: ...


def as_rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
