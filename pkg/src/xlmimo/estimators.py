"""Classical baselines: LS, LMMSE with an empirical covariance, and (hybrid) OMP.

All estimators accept a single observation ``(M,)`` or a batch ``(n, M)``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .channel import ArrayConfig, SignalConfig, far_field_steering, ls_estimate, near_field_steering

__all__ = [
    "CovarianceModel",
    "Dictionary",
    "OmpResult",
    "build_dictionary",
    "default_rings",
    "fit_covariance",
    "lmmse_estimate",
    "ls_estimate",
    "omp",
    "omp_estimate",
]


@dataclass
class CovarianceModel:
    R: np.ndarray
    sample_count: int

    @property
    def M(self) -> int:
        return self.R.shape[0]


def fit_covariance(channels: np.ndarray) -> CovarianceModel:
    """``R = (1/N) sum h h^H``, symmetrised to be exactly Hermitian."""
    h = np.atleast_2d(np.asarray(channels, dtype=complex))
    n, M = h.shape
    if n == 0:
        raise ValueError("cannot fit a covariance to an empty sample set")
    if n < M:
        warnings.warn(f"only {n} samples for a {M}x{M} covariance; estimate is rank-deficient",
                      stacklevel=2)
    R = (h.T @ h.conj()) / n
    R = (R + R.conj().T) / 2
    return CovarianceModel(R, n)


def lmmse_estimate(y: np.ndarray, sig: SignalConfig, cov: CovarianceModel) -> np.ndarray:
    """``R (R + (noise/P) I)^{-1} y / sqrt(P)`` via a linear solve."""
    h_ls = ls_estimate(y, sig)
    if sig.noise_variance == 0:
        return h_ls
    R = cov.R
    M = R.shape[0]
    ridge = 1e-10 * np.trace(R).real / M
    A = R + (sig.noise_variance / sig.pilot_power + ridge) * np.eye(M)
    z = np.linalg.solve(A, np.atleast_2d(h_ls).T)
    est = (R @ z).T
    return est.reshape(np.shape(h_ls))


@dataclass
class Dictionary:
    """Unit-norm steering atoms, ``atoms`` is ``(M, N)``.

    ``kinds`` holds ``"angular"`` or ``"polar"`` per column; ``r`` is NaN
    for angular atoms.
    """

    atoms: np.ndarray
    kinds: np.ndarray
    phi: np.ndarray
    r: np.ndarray

    @property
    def size(self) -> int:
        return self.atoms.shape[1]

    @property
    def angular(self) -> np.ndarray:
        return self.kinds == "angular"

    @property
    def polar(self) -> np.ndarray:
        return self.kinds == "polar"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["atom_index", "kind", "phi", "r"])
        for i in range(self.size):
            r = "" if math.isnan(self.r[i]) else repr(float(self.r[i]))
            w.writerow([i, self.kinds[i], repr(float(self.phi[i])), r])
        return buf.getvalue()


def default_rings(r_range: tuple[float, float] = (10.0, 80.0), n: int = 7) -> np.ndarray:
    """Geometrically spaced distances spanning ``r_range``."""
    lo, hi = r_range
    return np.geomspace(lo, hi, n)


def build_dictionary(array: ArrayConfig, n_angles: int, distance_grid=None) -> Dictionary:
    """Angular atoms on a uniform ``sin(phi)`` grid over ``[-1, 1)``, plus one
    polar atom per (angle, distance) pair when ``distance_grid`` is given."""
    if n_angles < 1:
        raise ValueError("need at least one angle")
    sines = -1 + 2 * np.arange(n_angles) / n_angles
    phis = np.arcsin(sines)
    cols = [far_field_steering(array, p) for p in phis]
    kinds = ["angular"] * n_angles
    phi_meta = list(phis)
    r_meta = [math.nan] * n_angles
    if distance_grid is not None:
        grid = np.asarray(distance_grid, dtype=float)
        if grid.size == 0:
            raise ValueError("distance grid is empty")
        for r in grid:
            for p in phis:
                cols.append(near_field_steering(array, p, r))
                kinds.append("polar")
                phi_meta.append(p)
                r_meta.append(r)
    return Dictionary(np.stack(cols, axis=1), np.array(kinds), np.array(phi_meta), np.array(r_meta))


@dataclass
class OmpResult:
    estimate: np.ndarray
    support: list[int]
    coefficients: np.ndarray
    residual_norms: list[float]


def omp(target: np.ndarray, dictionary: Dictionary, k_far: int, k_near: int = 0) -> OmpResult:
    """Greedy recovery of ``target`` (already LS-scaled).

    The first ``k_far`` picks are restricted to angular atoms and the next
    ``k_near`` to polar atoms. Ties go to the lowest atom index. An atom
    that makes the selected set rank-deficient is discarded and the step is
    retried with the next best atom.
    """
    A = dictionary.atoms
    k = k_far + k_near
    if k_far < 0 or k_near < 0:
        raise ValueError("sparsity levels must be non-negative")
    if k > A.shape[1]:
        raise ValueError(f"sparsity {k} exceeds dictionary size {A.shape[1]}")
    target = np.asarray(target, dtype=complex)
    residual = target.copy()
    norms = [float(np.linalg.norm(residual))]
    support: list[int] = []
    coef = np.zeros(0, dtype=complex)
    allowed_far, allowed_near = dictionary.angular.copy(), dictionary.polar.copy()
    for step in range(k):
        allowed = allowed_far if step < k_far else allowed_near
        while True:
            if not allowed.any():
                break
            corr = np.abs(A.conj().T @ residual)
            corr[~allowed] = -1.0
            idx = int(np.argmax(corr))
            allowed[idx] = False
            trial = support + [idx]
            q, rmat = np.linalg.qr(A[:, trial])
            diag = np.abs(np.diag(rmat))
            if diag.min() <= 1e-10 * diag.max():
                continue
            coef = np.linalg.solve(rmat, q.conj().T @ target)
            support = trial
            residual = target - A[:, support] @ coef
            norms.append(float(np.linalg.norm(residual)))
            break
        # an atom picked in the far stage must not be re-picked in the near stage
        allowed_far[support] = False
        allowed_near[support] = False
    est = A[:, support] @ coef if support else np.zeros_like(target)
    return OmpResult(est, support, coef, norms)


def omp_estimate(y: np.ndarray, sig: SignalConfig, dictionary: Dictionary, sparsity_k: int,
                 k_near: int = 0) -> np.ndarray:
    """OMP on the LS estimate; ``sparsity_k - k_near`` angular then ``k_near`` polar atoms.

    ``k_near = 0`` gives the angular-only (far-field) variant.
    """
    if sparsity_k < 0 or not 0 <= k_near <= sparsity_k:
        raise ValueError(f"invalid sparsity split k={sparsity_k}, k_near={k_near}")
    h_ls = ls_estimate(y, sig)
    k_far = sparsity_k - k_near
    if h_ls.ndim == 1:
        return omp(h_ls, dictionary, k_far, k_near).estimate
    return np.stack([omp(row, dictionary, k_far, k_near).estimate for row in h_ls])
