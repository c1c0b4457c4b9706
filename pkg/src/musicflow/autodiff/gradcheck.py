from __future__ import annotations

from collections.abc import Callable

import numpy as np

from musicflow.autodiff.array import Array, Tape, backward


def grad_check(f: Callable[[Array], Array], x: Array, eps: float = 1e-5) -> float:
    """
    Compare the taped gradient of a scalar function against central differences.

    Args:
        f: Pure scalar function of one array.
        x: Evaluation point; promoted to float64 for the check.
        eps: Finite-difference step.

    Returns:
        max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
        NaN means the adjoint produced a non-finite value.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    point = Array(np.array(x.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        root = f(point)
    backward(tape, root)
    analytic = point.grad if point.grad is not None else np.zeros_like(point.data)

    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        upper = f(Array(point.data.copy())).item()
        flat[i] = saved - eps
        lower = f(Array(point.data.copy())).item()
        flat[i] = saved
        numeric.reshape(-1)[i] = (upper - lower) / (2 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
