"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e}, worst {worst})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``.

    The floor keeps gradients that vanish identically (e.g. a conv bias
    feeding a train-mode batch norm) from turning roundoff into O(1) errors.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_gradient(loss: Callable[[], float], x: np.ndarray, step: float = 1e-5,
                     indices=None) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    gflat = grad.reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = loss()
        flat[i] = old - step
        fm = loss()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def grad_check(loss: Callable[[], float], arrays: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], tolerance: float = 1e-4,
               step: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare ``analytic[name]`` with finite differences of ``loss`` w.r.t. ``arrays[name]``.

    ``arrays`` must be the live float64 buffers ``loss`` reads from. With
    ``max_entries`` only a random subset of each array is probed and the
    error is measured on that subset.
    """
    report = GradCheckReport(tolerance=tolerance)
    rng = rng or np.random.default_rng(0)
    for name, x in arrays.items():
        if x.dtype != np.float64:
            raise TypeError(f"{name}: finite differences need float64, got {x.dtype}")
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != x.shape:
            raise ValueError(f"{name}: analytic gradient shape {a.shape} != {x.shape}")
        if max_entries is not None and x.size > max_entries:
            idx = np.sort(rng.choice(x.size, max_entries, replace=False))
        else:
            idx = np.arange(x.size)
        n = numeric_gradient(loss, x, step, idx)
        report.errors[name] = relative_error(a.reshape(-1)[idx], n.reshape(-1)[idx])
    return report
