"""End-to-end reconstruction: aggregate at (s, s + ds), deconvolve, extract.

The pipeline keeps exactly one ``(2, nx, ny)`` complex buffer alive after
aggregation. Both fields are deconvolved in place, then albedo and depth are
written block by block into the real and imaginary halves of the first field.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .aggregation import accumulate_events, accumulate_stream, accumulate_time
from .core import (
    ParameterError,
    Reconstruction,
    SamplingReport,
    WallGrid,
    check_chirp_sampling,
    check_positive,
)
from .deconvolution import DeconvOptions, chirp_convolve_inplace
from .extraction import (
    ESTIMATORS,
    RangeWarning,
    check_unambiguous,
    default_ds,
    depth_derivative,
    depth_phase_ratio,
    phase_rate,
    unambiguous_depth,
)
from .ledger import track

MODES = ("traditional", "loading", "fdh")

# elements per extraction block; keeps the temporaries far below one field
_EXTRACT_BLOCK = 4096


@dataclass(frozen=True)
class PipelineOptions:
    """Numerical settings shared by every acquisition mode."""

    deconv: DeconvOptions = field(default_factory=DeconvOptions)
    albedo_rel_threshold: float = 0.1
    estimator: str = "phase_ratio"
    dtype: type = np.complex128
    backend: str | None = None
    # small event chunks and FFT blocks keep the workspace well under one field
    chunk_size: int = 2048
    fft_block: int = 16

    def __post_init__(self):
        if not 0 < self.albedo_rel_threshold < 1:
            raise ParameterError(
                f"albedo_rel_threshold must lie in (0, 1), got {self.albedo_rel_threshold}"
            )
        if self.estimator not in ESTIMATORS:
            raise ParameterError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if np.dtype(self.dtype) not in (np.dtype(np.complex64), np.dtype(np.complex128)):
            raise ParameterError(f"dtype must be complex64 or complex128, got {self.dtype}")
        if self.chunk_size < 1 or self.fft_block < 1:
            raise ParameterError("chunk_size and fft_block must be positive")


@dataclass
class PipelineResult:
    reconstruction: Reconstruction
    s1: float
    s2: float
    d_max: float | None
    sampling: SamplingReport
    timings: dict[str, float]

    @property
    def ds(self) -> float:
        return self.s2 - self.s1

    @property
    def range_ok(self) -> bool:
        return self.d_max is None or check_unambiguous(self.d_max, self.s1, self.s2)


def resolve_ds(s: float, ds: float | None, d_max: float | None) -> float:
    """Explicit ``ds`` if given, otherwise the default rule for ``d_max``."""
    s = check_positive("s", s)
    if ds is not None:
        return check_positive("ds", ds)
    if d_max is None:
        raise ParameterError("either ds or d_max is needed to choose the second s value")
    return default_ds(s, d_max)


def max_event_depth(events, chunk_size: int = 65536) -> float:
    """Half of the largest photon path in an event source (one streaming pass)."""
    longest = 0.0
    for _, _, tof in events.chunks(chunk_size):
        if len(tof):
            longest = max(longest, float(np.max(tof)))
    return 0.5 * longest


def extract_inplace(fields: np.ndarray, s1: float, s2: float, *,
                    albedo_rel_threshold: float = 0.1,
                    estimator: str = "phase_ratio") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Albedo and depth from a ``(2, nx, ny)`` psi buffer, reusing its first field.

    Returns ``(albedo, depth, valid)`` where ``albedo`` and ``depth`` are
    strided real views into ``fields[0]``. Results equal
    :func:`~qfnlos.extraction.extract_depth` evaluated on the same data.
    """
    if not s2 > s1:
        raise ParameterError(f"need s1 < s2, got s1={s1}, s2={s2}")
    p1, p2 = fields[0], fields[1]
    nx, ny = p1.shape
    # never more than an eighth of a field, so small grids stay small too
    rows = max(1, min(_EXTRACT_BLOCK, nx * ny // 8) // ny)
    amax = 0.0
    for r0 in range(0, nx, rows):
        blk = np.abs(p1[r0:r0 + rows])
        if blk.size:
            amax = max(amax, float(blk.max()))
    real = p1.view(p1.real.dtype).reshape(nx, ny, 2)
    valid = np.empty((nx, ny), dtype=bool)
    track("valid_mask", valid)
    track("extract_block_tmp", rows * ny * 6, p1.itemsize)
    beta = phase_rate(s1, s2)
    thr = albedo_rel_threshold * amax
    for r0 in range(0, nx, rows):
        sl = slice(r0, r0 + rows)
        a1, a2 = p1[sl], p2[sl]
        amp = np.abs(a1)
        if estimator == "phase_ratio":
            d = depth_phase_ratio(a1, a2, beta)
        else:
            d = depth_derivative(a1, a2, s1, s2)
        ok = amp >= thr
        d = np.where(ok, d, 0.0)
        # a1 is fully consumed above, so its storage can now take the outputs
        real[sl, :, 0] = amp
        real[sl, :, 1] = d
        valid[sl] = ok
    return real[:, :, 0], real[:, :, 1], valid


def finish(fields: np.ndarray, grid: WallGrid, s1: float, s2: float,
           opts: PipelineOptions, timings: dict[str, float]) -> Reconstruction:
    """Deconvolve both fields in place and extract; consumes ``fields``."""
    t0 = time.perf_counter()
    for q, s in enumerate((s1, s2)):
        chirp_convolve_inplace(fields[q], grid.pitch, s, opts.deconv, block=opts.fft_block)
    t1 = time.perf_counter()
    albedo, depth, valid = extract_inplace(
        fields, s1, s2, albedo_rel_threshold=opts.albedo_rel_threshold,
        estimator=opts.estimator,
    )
    t2 = time.perf_counter()
    timings["deconvolve"] = t1 - t0
    timings["extract"] = t2 - t1
    return Reconstruction(grid, albedo, depth, valid)


def _run(accumulate, grid: WallGrid, s: float, ds: float | None, d_max: float | None,
         opts: PipelineOptions | None) -> PipelineResult:
    opts = opts or PipelineOptions()
    s1 = check_positive("s", s)
    s2 = s1 + resolve_ds(s1, ds, d_max)
    if d_max is not None and not check_unambiguous(d_max, s1, s2):
        warnings.warn(
            f"d_max={d_max} exceeds the unambiguous depth {unambiguous_depth(s1, s2):.6g} m "
            f"for s1={s1}, s2={s2}", RangeWarning, stacklevel=3,
        )
    half = opts.deconv.half_extents(grid)
    sampling = check_chirp_sampling(grid, s1, half)
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    fields = accumulate([s1, s2])
    timings["aggregate"] = time.perf_counter() - t0
    rec = finish(fields, grid, s1, s2, opts, timings)
    return PipelineResult(rec, s1, s2, d_max, sampling, timings)


def reconstruct_histogram(hist, s: float, *, ds: float | None = None,
                          d_max: float | None = None,
                          opts: PipelineOptions | None = None) -> PipelineResult:
    """Traditional mode: the full histogram is in memory.

    ``d_max`` defaults to half the histogram's largest path.
    """
    opts = opts or PipelineOptions()
    if d_max is None and ds is None:
        d_max = 0.5 * hist.max_path

    def acc(s_values):
        return accumulate_time(hist, s_values, dtype=opts.dtype, backend=opts.backend)

    return _run(acc, hist.grid, s, ds, d_max, opts)


def reconstruct_stream(stream, s: float, *, ds: float | None = None,
                       d_max: float | None = None,
                       opts: PipelineOptions | None = None) -> PipelineResult:
    """Loading mode: time slices arrive one at a time."""
    opts = opts or PipelineOptions()
    if d_max is None and ds is None:
        d_max = 0.5 * stream.nt * stream.bin_length

    def acc(s_values):
        return accumulate_stream(stream, s_values, dtype=opts.dtype, backend=opts.backend)

    return _run(acc, stream.grid, s, ds, d_max, opts)


def reconstruct_events(events, s: float, *, ds: float | None = None,
                       d_max: float | None = None,
                       opts: PipelineOptions | None = None) -> PipelineResult:
    """FDH mode: photon events are accumulated as they arrive.

    Without ``ds`` or ``d_max`` an extra pass over the events finds the
    largest path, so the source must be re-iterable in that case.
    """
    opts = opts or PipelineOptions()
    if d_max is None and ds is None:
        d_max = max_event_depth(events, opts.chunk_size)
        if d_max == 0:
            raise ParameterError("event source is empty; cannot derive ds, pass ds explicitly")

    def acc(s_values):
        return accumulate_events(events, s_values, dtype=opts.dtype,
                                 chunk_size=opts.chunk_size, backend=opts.backend)

    return _run(acc, events.grid, s, ds, d_max, opts)


def reconstruct_fields(phi1, phi2, *, opts: PipelineOptions | None = None) -> PipelineResult:
    """Run deconvolution and extraction on two precomputed aggregated fields."""
    opts = opts or PipelineOptions()
    if phi1.grid != phi2.grid:
        raise ParameterError("aggregated fields live on different grids")
    fields = np.stack([phi1.data, phi2.data]).astype(opts.dtype)
    timings = {"aggregate": 0.0}
    rec = finish(fields, phi1.grid, phi1.s, phi2.s, opts, timings)
    sampling = check_chirp_sampling(phi1.grid, phi1.s, opts.deconv.half_extents(phi1.grid))
    return PipelineResult(rec, phi1.s, phi2.s, None, sampling, timings)


def sharpness(albedo: np.ndarray) -> float:
    """Peak over RMS of an albedo map; larger means more concentrated energy."""
    rms = math.sqrt(float(np.mean(np.square(albedo, dtype=np.float64)))) if albedo.size else 0.0
    return float(np.max(albedo)) / rms if rms > 0 else 0.0
