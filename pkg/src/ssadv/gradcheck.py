"""Central finite differences for checking analytic gradients.

The numeric side only calls the forward function, so it stays independent
of the backward pass it is checking.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T


def central_difference(f: Callable[[], float], array: np.ndarray, index, h: float = 1e-3) -> float:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` with ``array`` modified in place
    and restored afterwards."""
    old = array[index]
    array[index] = old + h
    fp = f()
    array[index] = old - h
    fm = f()
    array[index] = old
    return (fp - fm) / (2 * h)


def _masks(f):
    with T.record_relu_masks() as log:
        value = f()
    return value, log


def smooth_central_difference(f: Callable[[], float], array: np.ndarray, index, h: float = 1e-3):
    """Central difference, or ``None`` when some ReLU changes state anywhere
    in ``[x - h, x + h]`` (the function is not differentiable there at the
    resolution of ``h`` and the difference says nothing about the gradient).
    """
    _, base = _masks(f)
    old = array[index]
    array[index] = old + h
    fp, plus = _masks(f)
    array[index] = old - h
    fm, minus = _masks(f)
    array[index] = old
    for a, b, c in zip(base, plus, minus):
        if not (np.array_equal(a, b) and np.array_equal(a, c)):
            return None
    return (fp - fm) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps two near-zero
    values from producing a meaningless ratio."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def sample_indices(shape, k: int, rng: np.random.Generator) -> list[tuple]:
    flat = rng.choice(int(np.prod(shape)), size=min(k, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check(f: Callable[[], float], arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray],
          picks: Sequence[tuple[int, tuple]], h: float = 1e-3) -> list[float]:
    """Relative errors at ``picks`` = ``[(array_number, index), ...]``."""
    return [relative_error(float(grads[a][idx]), central_difference(f, arrays[a], idx, h)) for a, idx in picks]
