"""Albedo and depth from the modulated albedo psi = a exp(-i d^2 / 4 s^2).

Depth needs psi at two close values ``s1 < s2``. With
``beta = 1/(4 s1^2) - 1/(4 s2^2)`` the ratio ``psi1 / psi2 = exp(-i d^2 beta)``,
so ``d^2`` is recoverable modulo ``2 pi / beta`` (the unambiguous range).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .core import DataError, ModulatedAlbedo, ParameterError, check_positive

ESTIMATORS = ("phase_ratio", "derivative")


class RangeWarning(UserWarning):
    """The configured maximum depth exceeds the unambiguous range of (s1, s2)."""


@dataclass(frozen=True)
class DepthOptions:
    ds: float | None = None
    albedo_rel_threshold: float = 0.1
    estimator: str = "phase_ratio"
    # largest scene depth expected; used for the range check and the default ds
    d_max: float | None = None

    def __post_init__(self):
        if self.ds is not None:
            check_positive("ds", self.ds)
        if not 0 < self.albedo_rel_threshold < 1:
            raise ParameterError(
                f"albedo_rel_threshold must lie in (0, 1), got {self.albedo_rel_threshold}"
            )
        if self.estimator not in ESTIMATORS:
            raise ParameterError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.d_max is not None:
            check_positive("d_max", self.d_max)


def phase_rate(s1: float, s2: float) -> float:
    """beta = 1/(4 s1^2) - 1/(4 s2^2)."""
    return 1.0 / (4.0 * s1 * s1) - 1.0 / (4.0 * s2 * s2)


def unambiguous_depth(s1: float, s2: float) -> float:
    """Largest depth whose squared value stays below 2 pi / beta."""
    return math.sqrt(2.0 * math.pi / phase_rate(s1, s2))


def default_ds(s: float, d_max: float) -> float:
    """Largest ds with d_max^2 * ds / (2 s^3) <= pi, i.e. half the unambiguous range."""
    s = check_positive("s", s)
    d_max = check_positive("d_max", d_max)
    return 2.0 * math.pi * s**3 / (d_max * d_max)


def check_unambiguous(d_max: float, s1: float, s2: float) -> bool:
    return d_max * d_max * phase_rate(s1, s2) < 2.0 * math.pi


def extract_albedo(psi: ModulatedAlbedo | np.ndarray) -> np.ndarray:
    data = psi.data if isinstance(psi, ModulatedAlbedo) else np.asarray(psi)
    return np.abs(data)


def depth_phase_ratio(p1: np.ndarray, p2: np.ndarray, beta: float) -> np.ndarray:
    """Per-pixel depth from arg(psi1 / psi2), mapped into [0, sqrt(2 pi / beta))."""
    ratio = p1 * np.conj(p2)
    d2 = np.mod(-np.angle(ratio), 2.0 * np.pi) / beta
    return np.sqrt(d2)


def depth_derivative(p1: np.ndarray, p2: np.ndarray, s1: float, s2: float) -> np.ndarray:
    """Depth from ``-2 i s^3 psi^-1 dpsi/ds`` by a central difference at the midpoint.

    Accurate only while d^2 * beta << 1.
    """
    ds = s2 - s1
    s_mid = 0.5 * (s1 + s2)
    p_mid = 0.5 * (p1 + p2)
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = (-2j * s_mid**3 * (p2 - p1) / ds / p_mid).real
    d2 = np.where(np.isfinite(d2), d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def _validate_pair(psi1: ModulatedAlbedo, psi2: ModulatedAlbedo):
    if psi1.grid != psi2.grid:
        raise DataError(f"psi grids differ: {psi1.grid} vs {psi2.grid}")
    s1, s2 = psi1.s, psi2.s
    if not s2 > s1:
        raise ParameterError(f"need s1 < s2, got s1={s1}, s2={s2}")
    return s1, s2


def extract_depth(psi1: ModulatedAlbedo, psi2: ModulatedAlbedo,
                  opts: DepthOptions | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Depth map and validity mask from psi at ``s1`` and ``s2 > s1``.

    A pixel is valid when ``|psi1| >= albedo_rel_threshold * max |psi1|``;
    invalid pixels get depth 0. If ``opts.d_max`` is set and exceeds the
    unambiguous range a :class:`RangeWarning` is issued.
    """
    opts = opts or DepthOptions()
    s1, s2 = _validate_pair(psi1, psi2)
    if opts.d_max is not None and not check_unambiguous(opts.d_max, s1, s2):
        warnings.warn(
            f"d_max={opts.d_max} exceeds the unambiguous depth "
            f"{unambiguous_depth(s1, s2):.6g} m for s1={s1}, s2={s2}",
            RangeWarning, stacklevel=2,
        )
    p1, p2 = psi1.data, psi2.data
    if opts.estimator == "phase_ratio":
        depth = depth_phase_ratio(p1, p2, phase_rate(s1, s2))
    else:
        depth = depth_derivative(p1, p2, s1, s2)
    amp = np.abs(p1)
    valid = amp >= opts.albedo_rel_threshold * amp.max() if amp.size else amp.astype(bool)
    depth = np.where(valid, depth, 0.0).astype(depth.dtype, copy=False)
    return depth, valid


def wiener_post_filter(albedo: np.ndarray, noise_power_ratio: float, *,
                       smoothing: int = 3) -> np.ndarray:
    """Frequency-domain Wiener attenuation ``H = P / (P + noise_power)``.

    ``P`` is the periodogram ``|A(f)|^2 / n_pixels`` smoothed over a
    ``smoothing x smoothing`` neighbourhood of frequencies. The absolute noise
    power is ``noise_power_ratio * mean(albedo^2)``, so the ratio is the
    noise-to-signal power ratio of the image. The DC gain is pinned to 1.
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    if noise_power_ratio < 0:
        raise ParameterError(f"noise_power_ratio must be >= 0, got {noise_power_ratio}")
    if noise_power_ratio == 0 or albedo.size == 0:
        return albedo.copy()
    spectrum = scipy.fft.fft2(albedo)
    power = np.abs(spectrum) ** 2 / albedo.size
    if smoothing > 1:
        from scipy.ndimage import uniform_filter

        power = uniform_filter(power, size=smoothing, mode="wrap")
    noise = noise_power_ratio * float(np.mean(albedo**2))
    gain = power / (power + noise)
    gain[0, 0] = 1.0
    return scipy.fft.ifft2(spectrum * gain).real
