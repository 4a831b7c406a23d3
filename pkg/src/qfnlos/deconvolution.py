"""Deconvolution in space: phi(x; s) -> psi(x; s).

The inverse is a 2-D convolution with the chirp exp(i |u|^2 / 4 s^2), scaled by
``pitch^2 / (16 pi^2 s^4)`` (the Riemann measure times the continuous
normalization)::

    psi[i, j] = pitch^2 / (16 pi^2 s^4) * sum_{i', j'} K(i' - i, j' - j) phi[i', j']

The kernel factors as ``K(m1, m2) = g_x(m1) * g_y(m2)``, so the FFT path runs
two 1-D passes and stores only two 1-D filter spectra. Passes work in place
on blocks of columns (then rows), so the live workspace is one padded block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .core import (
    AggregatedField,
    DataError,
    ModulatedAlbedo,
    ParameterError,
    WallGrid,
    check_positive,
)
from .ledger import track

PADDING_MODES = ("full", "none")


@dataclass(frozen=True)
class DeconvOptions:
    """Boundary handling and kernel support.

    ``kernel_extent`` is ``"matched"`` (kernel support equals the field, i.e.
    offsets up to ``n - 1``) or an explicit ``(Kx, Ky)`` of odd tap counts.
    """

    padding: str = "full"
    kernel_extent: str | tuple[int, int] = "matched"

    def __post_init__(self):
        if self.padding not in PADDING_MODES:
            raise ParameterError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")
        if self.kernel_extent != "matched":
            try:
                kx, ky = (int(v) for v in self.kernel_extent)
            except (TypeError, ValueError):
                raise ParameterError(
                    f"kernel_extent must be 'matched' or (Kx, Ky), got {self.kernel_extent!r}"
                ) from None
            if kx < 1 or ky < 1 or kx % 2 == 0 or ky % 2 == 0:
                raise ParameterError(f"explicit kernel extents must be odd and >= 1, got {(kx, ky)}")
            object.__setattr__(self, "kernel_extent", (kx, ky))

    def half_extents(self, grid: WallGrid) -> tuple[int, int]:
        if self.kernel_extent == "matched":
            return grid.nx - 1, grid.ny - 1
        kx, ky = self.kernel_extent
        return (kx - 1) // 2, (ky - 1) // 2


def chirp_kernel_1d(half_extent: int, pitch: float, s: float) -> np.ndarray:
    """Taps ``exp(i (m * pitch)^2 / (4 s^2))`` for ``m = -half_extent .. half_extent``."""
    s = check_positive("s", s)
    pitch = check_positive("pitch", pitch)
    m = np.arange(-half_extent, half_extent + 1)
    u = m * pitch
    return np.exp(1j * (u * u / (4.0 * s * s)))


def chirp_kernel_2d(half_x: int, half_y: int, pitch: float, s: float) -> np.ndarray:
    """Outer product of the two 1-D chirps; only used by the direct reference."""
    return np.multiply.outer(chirp_kernel_1d(half_x, pitch, s), chirp_kernel_1d(half_y, pitch, s))


def deconvolution_scale(pitch: float, s: float) -> float:
    return pitch * pitch / (16.0 * math.pi**2 * s**4)


def padded_length(n: int, half: int, padding: str) -> int:
    if padding == "none":
        return n
    return scipy.fft.next_fast_len(n + 2 * half, real=False)


def _fold(taps: np.ndarray, half: int, n: int) -> np.ndarray:
    # wrap kernel taps onto a period-n circle
    folded = np.zeros(n, dtype=taps.dtype)
    np.add.at(folded, np.arange(-half, half + 1) % n, taps)
    return folded


def _filter_spectrum(n, half, pitch, s, padding, dtype) -> tuple[np.ndarray, int]:
    taps = chirp_kernel_1d(half, pitch, s)
    L = padded_length(n, half, padding)
    track("filter_taps", taps.size + L, taps.itemsize)
    if padding == "none":
        spec = scipy.fft.fft(_fold(taps, half, n))
    else:
        # full linear convolution; output sample i sits at index i + half
        spec = scipy.fft.fft(taps, L)
    return spec.astype(dtype), L


def _pass(data: np.ndarray, axis: int, spec: np.ndarray, L: int, half: int,
          padding: str, block: int, name: str) -> None:
    n = data.shape[axis]
    other = data.shape[1 - axis]
    block = max(1, min(block, other))
    # lines along the transform axis are rows of buf, so every block is contiguous
    buf = np.empty((block, L), dtype=data.dtype)
    track(name, buf)
    start = half if padding == "full" else 0
    for b0 in range(0, other, block):
        b1 = min(b0 + block, other)
        lines = data[:, b0:b1].T if axis == 0 else data[b0:b1, :]
        work = buf[:b1 - b0]
        work[:, :n] = lines
        work[:, n:] = 0
        out = scipy.fft.fft(work, axis=1, overwrite_x=True)
        out *= spec
        out = scipy.fft.ifft(out, axis=1, overwrite_x=True)
        lines[...] = out[:, start:start + n]


def chirp_convolve_inplace(data: np.ndarray, pitch: float, s: float,
                           opts: DeconvOptions | None = None, *, block: int = 32) -> np.ndarray:
    """Overwrite a complex ``(nx, ny)`` array with its scaled chirp convolution.

    Works for complex64 and complex128 arrays; the dtype is preserved.
    """
    opts = opts or DeconvOptions()
    if data.ndim != 2 or not np.iscomplexobj(data):
        raise DataError("chirp_convolve_inplace expects a 2-D complex array")
    nx, ny = data.shape
    grid = WallGrid(nx, ny, pitch)
    hx, hy = opts.half_extents(grid)
    spec_x, Lx = _filter_spectrum(nx, hx, pitch, s, opts.padding, data.dtype)
    spec_y, Ly = _filter_spectrum(ny, hy, pitch, s, opts.padding, data.dtype)
    track("filter_x", spec_x)
    track("filter_y", spec_y)
    # the two passes run one after the other and share one ledger entry
    _pass(data, 0, spec_x, Lx, hx, opts.padding, block, "fft_workspace")
    _pass(data, 1, spec_y, Ly, hy, opts.padding, block, "fft_workspace")
    data *= data.dtype.type(deconvolution_scale(pitch, s))
    return data


def _check_phi(phi: AggregatedField) -> None:
    if not np.all(np.isfinite(phi.data)):
        raise DataError("aggregated field contains non-finite values")


def deconvolve_fft(phi: AggregatedField, opts: DeconvOptions | None = None) -> ModulatedAlbedo:
    """FFT evaluation of the chirp-convolution inverse. Output grid equals input grid."""
    _check_phi(phi)
    data = np.array(phi.data, dtype=phi.data.dtype, copy=True)
    chirp_convolve_inplace(data, phi.grid.pitch, phi.s, opts)
    return ModulatedAlbedo(phi.grid, phi.s, data)


def deconvolve_direct(phi: AggregatedField, opts: DeconvOptions | None = None) -> ModulatedAlbedo:
    """Brute-force O(N^4) evaluation of the same sum, for verification on small grids."""
    opts = opts or DeconvOptions()
    _check_phi(phi)
    grid = phi.grid
    nx, ny = grid.shape
    hx, hy = opts.half_extents(grid)
    src = phi.data.astype(np.complex128)
    psi = np.zeros(grid.shape, dtype=np.complex128)
    if opts.padding == "none":
        kx = _fold(chirp_kernel_1d(hx, grid.pitch, phi.s), hx, nx)
        ky = _fold(chirp_kernel_1d(hy, grid.pitch, phi.s), hy, ny)
        K = np.multiply.outer(kx, ky)
        ii, jj = np.arange(nx), np.arange(ny)
        for i in range(nx):
            for j in range(ny):
                psi[i, j] = np.sum(K[np.ix_((ii - i) % nx, (jj - j) % ny)] * src)
    else:
        K = chirp_kernel_2d(hx, hy, grid.pitch, phi.s)
        for i in range(nx):
            i0, i1 = max(0, i - hx), min(nx, i + hx + 1)
            for j in range(ny):
                j0, j1 = max(0, j - hy), min(ny, j + hy + 1)
                # K index of offset (i' - i) is (i' - i) + hx
                Ks = K[i0 - i + hx:i1 - i + hx, j0 - j + hy:j1 - j + hy]
                psi[i, j] = np.sum(Ks * src[i0:i1, j0:j1])
    psi *= deconvolution_scale(grid.pitch, phi.s)
    return ModulatedAlbedo(grid, phi.s, psi.astype(phi.data.dtype))
