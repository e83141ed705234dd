"""Hybrid near/far-field XL-MIMO uplink channel model.

Covers array geometry, steering vectors, path sampling, the hybrid-field
channel sum, the pilot observation model, LS preprocessing and the
complex-vector <-> real-tensor packing fed to the networks.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ArrayConfig:
    """Uniform linear array at the base station.

    ``d`` defaults to half a wavelength.
    """

    M: int
    lam: float = 0.01
    d: float | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"wavelength must be positive, got {self.lam}")
        if self.d is None:
            object.__setattr__(self, "d", self.lam / 2)
        if self.d <= 0:
            raise ValueError(f"antenna spacing must be positive, got {self.d}")
        if self.M < 1:
            raise ValueError(f"antenna count must be positive, got {self.M}")

    @property
    def side(self) -> int:
        """Side length of the (side, side, 2) real tensor; requires square M."""
        s = math.isqrt(self.M)
        if s * s != self.M or self.M < 4:
            raise ValueError(f"M={self.M} is not a perfect square >= 4")
        return s


class FieldKind(enum.Enum):
    FAR = "far"
    NEAR = "near"


@dataclass(frozen=True)
class PathParams:
    gain: complex
    phi: float
    kind: FieldKind
    r: float | None = None

    def __post_init__(self):
        if not -math.pi / 2 <= self.phi <= math.pi / 2:
            raise ValueError(f"azimuth {self.phi} outside [-pi/2, pi/2]")
        if self.kind is FieldKind.NEAR and (self.r is None or self.r <= 0):
            raise ValueError("near-field path needs a positive distance")
        if self.kind is FieldKind.FAR and self.r is not None:
            raise ValueError("far-field path carries no distance")


@dataclass(frozen=True)
class ChannelConfig:
    array: ArrayConfig
    L: int = 6
    L0: int = 1
    gain_variance: float = 1.0
    r_range: tuple[float, float] = (10.0, 80.0)

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("need at least one path")
        if not 0 <= self.L0 <= self.L:
            raise ValueError(f"L0={self.L0} must lie in [0, L={self.L}]")
        lo, hi = self.r_range
        if lo <= 0 or hi <= lo:
            raise ValueError(f"invalid distance range {self.r_range}")
        if self.gain_variance < 0:
            raise ValueError("gain variance must be non-negative")


@dataclass(frozen=True)
class SignalConfig:
    pilot_power: float = 1.0
    noise_variance: float = 0.1

    def __post_init__(self):
        if self.pilot_power <= 0:
            raise ValueError("pilot power must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be non-negative")

    @property
    def snr_db(self) -> float:
        if self.noise_variance == 0:
            return math.inf
        return 10 * math.log10(self.pilot_power / self.noise_variance)

    @classmethod
    def from_snr_db(cls, snr_db: float, pilot_power: float = 1.0) -> "SignalConfig":
        return cls(pilot_power, pilot_power * 10 ** (-snr_db / 10))


def rayleigh_distance(array: ArrayConfig) -> float:
    """Near/far boundary ``2 D_a^2 / lambda`` with aperture ``D_a = M d``.

    At half-wavelength spacing this is ``M^2 lambda / 2``, which is the form
    used throughout; using ``M d`` (not ``(M-1) d``) keeps the two
    expressions identical.
    """
    if array.M < 1:
        raise ValueError("antenna count must be positive")
    if array.d == array.lam / 2:
        return array.M**2 * array.lam / 2
    aperture = array.M * array.d
    return 2 * aperture**2 / array.lam


def antenna_offsets(M: int) -> np.ndarray:
    """Antenna positions in units of ``d``, symmetric about the array centre."""
    m = np.arange(M)
    return (2 * m - M + 1) / 2


def far_field_steering(array: ArrayConfig, phi: float) -> np.ndarray:
    m = np.arange(array.M)
    phase = -2j * np.pi * (array.d / array.lam) * m * np.sin(phi)
    return np.exp(phase) / np.sqrt(array.M)


def near_field_steering(array: ArrayConfig, phi: float, r: float) -> np.ndarray:
    """Spherical-wave response for a scatterer at distance ``r`` from the array centre.

    Phases are referenced to the first antenna and the cross term's sign is
    chosen so that ``r -> inf`` reproduces :func:`far_field_steering` entry by
    entry.
    """
    if r <= 0:
        raise ValueError(f"distance must be positive, got {r}")
    delta = antenna_offsets(array.M) * array.d
    s = np.sin(phi)
    # r_m - r in a cancellation-free form; plain subtraction loses every digit
    # once r is many orders above the aperture
    num = delta**2 + 2 * r * delta * s
    excess = num / (np.sqrt(r**2 + num) + r)
    return np.exp(-2j * np.pi * (excess - excess[0]) / array.lam) / np.sqrt(array.M)


def steering(array: ArrayConfig, path: PathParams) -> np.ndarray:
    if path.kind is FieldKind.FAR:
        return far_field_steering(array, path.phi)
    return near_field_steering(array, path.phi, path.r)


def complex_normal(rng: np.random.Generator, size, variance: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian, ``variance/2`` per real part."""
    scale = math.sqrt(variance / 2)
    re = rng.normal(0.0, scale, size)
    im = rng.normal(0.0, scale, size)
    return re + 1j * im


def sample_paths(cfg: ChannelConfig, rng: np.random.Generator) -> list[PathParams]:
    """Draw ``L0`` far-field then ``L - L0`` near-field paths."""
    gains = complex_normal(rng, cfg.L, cfg.gain_variance)
    phis = rng.uniform(-np.pi / 2, np.pi / 2, cfg.L)
    n_near = cfg.L - cfg.L0
    rs = rng.uniform(cfg.r_range[0], cfg.r_range[1], n_near)
    paths = [PathParams(complex(gains[l]), float(phis[l]), FieldKind.FAR) for l in range(cfg.L0)]
    for i in range(n_near):
        l = cfg.L0 + i
        paths.append(PathParams(complex(gains[l]), float(phis[l]), FieldKind.NEAR, float(rs[i])))
    return paths


def generate_channel(paths: list[PathParams], array: ArrayConfig) -> np.ndarray:
    if not paths:
        raise ValueError("path list is empty")
    h = np.zeros(array.M, dtype=complex)
    for p in paths:
        h += p.gain * steering(array, p)
    return math.sqrt(array.M / len(paths)) * h


def draw_channel(cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    return generate_channel(sample_paths(cfg, rng), cfg.array)


def received_signal(h: np.ndarray, sig: SignalConfig, rng: np.random.Generator) -> np.ndarray:
    """``y = sqrt(P) h + noise``; no RNG draw when the noise variance is zero."""
    y = math.sqrt(sig.pilot_power) * np.asarray(h, dtype=complex)
    if sig.noise_variance > 0:
        y = y + complex_normal(rng, y.shape, sig.noise_variance)
    return y


def ls_estimate(y: np.ndarray, sig: SignalConfig) -> np.ndarray:
    if sig.pilot_power <= 0:
        raise ValueError("pilot power must be positive")
    return np.asarray(y) / math.sqrt(sig.pilot_power)


def _side(M: int) -> int:
    s = math.isqrt(M)
    if s * s != M:
        raise ValueError(f"M={M} is not a perfect square")
    return s


def pack_real(h: np.ndarray) -> np.ndarray:
    """Complex ``(..., M)`` -> real ``(..., sqrt(M), sqrt(M), 2)``, row-major planes."""
    h = np.asarray(h)
    s = _side(h.shape[-1])
    grid = h.reshape(h.shape[:-1] + (s, s))
    return np.stack([grid.real, grid.imag], axis=-1)


def unpack_real(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim < 3 or t.shape[-1] != 2 or t.shape[-2] != t.shape[-3]:
        raise ValueError(f"expected (..., s, s, 2) tensor, got {t.shape}")
    s = t.shape[-2]
    # assign parts directly; re + 1j*im would not preserve signed zeros
    z = np.empty(t.shape[:-1], dtype=complex)
    z.real = t[..., 0]
    z.imag = t[..., 1]
    return z.reshape(t.shape[:-3] + (s * s,))
