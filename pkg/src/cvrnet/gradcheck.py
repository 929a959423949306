"""Central finite-difference gradient checking.

The checker only ever calls a scalar function of the inputs; it knows
nothing about the analytic backward it is used to audit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    ``floor`` keeps entries whose true gradient is zero (or nearly so) from
    turning round-off into huge ratios.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f: Callable[[], float], x: np.ndarray, index, eps: float,
                       max_refine: int = 3) -> float:
    """d f / d x[index] by central differences, mutating ``x`` in place.

    If the one-sided slopes disagree the step straddles a kink (ReLU, max),
    so the step is shrunk tenfold, up to ``max_refine`` times.
    """
    orig = x[index]
    try:
        base = None
        for _ in range(max_refine + 1):
            x[index] = orig + eps
            fp = f()
            x[index] = orig - eps
            fm = f()
            if max_refine == 0:
                break
            if base is None:
                x[index] = orig
                base = f()
            fwd, bwd = (fp - base) / eps, (base - fm) / eps
            scale = max(abs(fwd), abs(bwd), 1e-8)
            if abs(fwd - bwd) <= 1e-3 * scale + 1e3 * eps:
                break
            eps /= 10.0
        return (fp - fm) / (2.0 * eps)
    finally:
        x[index] = orig


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6,
                       indices: Sequence | None = None, max_refine: int = 3) -> tuple[list, np.ndarray]:
    """Finite-difference gradient of ``f`` w.r.t. selected entries of ``x``.

    Returns ``(indices, values)``; with ``indices=None`` every entry is visited.
    """
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    vals = np.array([central_difference(f, x, idx, eps, max_refine) for idx in indices])
    return list(indices), vals


def sample_indices(shape: tuple, count: int, rng: np.random.Generator) -> list:
    size = int(np.prod(shape))
    if count >= size:
        return list(np.ndindex(*shape))
    flat = rng.choice(size, size=count, replace=False)
    return [np.unravel_index(int(i), shape) for i in np.sort(flat)]


def check_gradients(f: Callable[[], float], arrays: dict[str, np.ndarray],
                    analytic: dict[str, np.ndarray], eps: float = 1e-6,
                    samples: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-6, max_refine: int = 3) -> list[GradCheckResult]:
    """Compare ``analytic[name]`` against finite differences of ``f`` for each array.

    ``f`` must read the arrays by reference; they are perturbed in place and
    restored afterwards.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    results = []
    for name, arr in arrays.items():
        idx = None if samples is None else sample_indices(arr.shape, samples, rng)
        idx, num = numerical_gradient(f, arr, eps, idx, max_refine)
        ana = np.array([analytic[name][i] for i in idx])
        err = relative_error(ana, num, floor)
        results.append(GradCheckResult(name, float(err.max()) if err.size else 0.0, len(idx)))
    return results
