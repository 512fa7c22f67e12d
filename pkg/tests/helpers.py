"""Shared test oracles: central finite differences against analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def central_diff(f: Callable[[], float], arr: np.ndarray, index: tuple, h: float = 1e-4) -> float:
    """d f / d arr[index] by central differences, restoring arr afterwards."""
    orig = arr[index]
    arr[index] = orig + h
    up = f()
    arr[index] = orig - h
    down = f()
    arr[index] = orig
    return (up - down) / (2.0 * h)


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def max_grad_rel_error(
    f: Callable[[], float],
    arrays: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    rng: np.random.Generator,
    probes_per_array: int = 3,
    h: float = 1e-4,
) -> float:
    """Probe random coordinates of each array; return the worst relative error."""
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = np.zeros(flat.shape) if grad is None else np.asarray(grad).reshape(-1)
        n = flat.shape[0]
        picks = rng.choice(n, size=min(probes_per_array, n), replace=False)
        for i in picks:
            numeric = central_diff(f, flat, (int(i),), h=h)
            worst = max(worst, rel_error(float(gflat[i]), numeric))
    return worst
