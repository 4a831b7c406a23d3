"""Integration over time: transient data -> aggregated complex field phi(x; s).

Three entry points, one per acquisition regime:

* :func:`aggregate_time` holds the whole ``nx x ny x nt`` histogram (O(N^3) memory).
* :func:`aggregate_stream` consumes one time-bin slice at a time (O(N^2) memory).
* :func:`aggregate_events` accumulates photon events as they arrive (O(N^2) memory,
  O(1) work per photon).

The histogram paths use the midpoint rule over bin centers. With
``rho_n = (n + 0.5) * bin_length`` the weight of bin ``n`` is::

    w_n = (rho_n / 2)^k * exp(-i rho_n^2 / (16 s^2)) * bin_length / 2

which is the path-unit form of ``c^(k+1)/2^(k+1) * exp(-i c^2 t^2 / 16 s^2) * t^k * dt``.
Bins are summed in ascending order for every pixel, so batch and stream
results are bitwise identical.

The event path sums ``r^k exp(-pi i omega r^2)`` with ``r = c T / 2`` and
``omega = 1 / (4 pi s^2)``. It carries no ``bin_length / 2`` quadrature
factor and counts photons rather than intensity density, so its output is a
constant multiple of the histogram path's output; depth only uses phase
ratios and albedo is only defined up to a global scale, so the two scales
are deliberately left unreconciled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from ._backend import get_backend
from .core import (
    AggregatedField,
    ParameterError,
    StreamError,
    TransientHistogram,
    WallGrid,
    check_falloff,
    check_positive,
    validate_events,
)
from .ledger import track

_ACC_DTYPES = {np.dtype(np.complex64): np.float32, np.dtype(np.complex128): np.float64}


def _s_list(s) -> list[float]:
    values = [s] if np.isscalar(s) else list(s)
    if not values:
        raise ParameterError("at least one s value is required")
    return [check_positive("s", v) for v in values]


def _new_accumulator(ns: int, grid: WallGrid, dtype) -> np.ndarray:
    dtype = np.dtype(dtype)
    if dtype not in _ACC_DTYPES:
        raise ParameterError(f"accumulator dtype must be complex64 or complex128, got {dtype}")
    acc = np.zeros((ns, grid.nx, grid.ny), dtype=dtype)
    for q in range(ns):
        track(f"field_{q}", acc[q])
    return acc


def _real_view(acc: np.ndarray) -> np.ndarray:
    return acc.view(_ACC_DTYPES[acc.dtype])


def time_weights(nt: int, bin_length: float, k: int, s: float) -> np.ndarray:
    """Quadrature weights of the time aggregation, one complex value per bin."""
    s = check_positive("s", s)
    k = check_falloff(k)
    rho = (np.arange(nt) + 0.5) * bin_length
    return (rho / 2) ** k * np.exp(-1j * rho**2 / (16.0 * s * s)) * (bin_length / 2)


def _weight_table(nt, bin_length, k, s_values):
    w = np.stack([time_weights(nt, bin_length, k, s) for s in s_values])
    w_re = np.ascontiguousarray(w.real)
    w_im = np.ascontiguousarray(w.imag)
    track("time_weights", w_re.size * 2, 8)
    return w_re, w_im


def _fields(acc, grid, s_values, k):
    return [AggregatedField(grid, s, acc[q], falloff_k=k) for q, s in enumerate(s_values)]


def aggregate_time(hist: TransientHistogram, s: float, *, dtype=np.complex128,
                   backend: str | None = None) -> AggregatedField:
    """Aggregate a fully loaded histogram at one value of ``s``."""
    return aggregate_time_multi(hist, [s], dtype=dtype, backend=backend)[0]


def aggregate_time_multi(hist: TransientHistogram, s_values: Sequence[float], *,
                         dtype=np.complex128, backend: str | None = None) -> list[AggregatedField]:
    s_values = _s_list(s_values)
    acc = accumulate_time(hist, s_values, dtype=dtype, backend=backend)
    return _fields(acc, hist.grid, s_values, hist.falloff_k)


def accumulate_time(hist, s_values, *, dtype=np.complex128, backend=None) -> np.ndarray:
    """Like :func:`aggregate_time_multi` but returns the raw ``(ns, nx, ny)`` accumulator."""
    s_values = _s_list(s_values)
    track("histogram", hist.data)
    w_re, w_im = _weight_table(hist.nt, hist.bin_length, hist.falloff_k, s_values)
    acc = _new_accumulator(len(s_values), hist.grid, dtype)
    get_backend(backend).accumulate_cube(hist.data, w_re, w_im, _real_view(acc))
    return acc


@dataclass
class BinSliceStream:
    """Pull-based source of histogram time slices ``tau[:, :, n]``, n = 0 .. nt-1.

    ``source`` is any iterable of 2-D arrays; it is consumed once.
    """

    grid: WallGrid
    nt: int
    bin_length: float
    falloff_k: int
    source: Iterable[np.ndarray]

    def __post_init__(self):
        self.bin_length = check_positive("bin_length", self.bin_length)
        self.falloff_k = check_falloff(self.falloff_k)
        if int(self.nt) < 0:
            raise ParameterError(f"nt must be nonnegative, got {self.nt}")
        self.nt = int(self.nt)

    @classmethod
    def from_histogram(cls, hist: TransientHistogram) -> "BinSliceStream":
        slices = (hist.data[:, :, n] for n in range(hist.nt))
        return cls(hist.grid, hist.nt, hist.bin_length, hist.falloff_k, slices)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.source)


def aggregate_stream(stream: BinSliceStream, s: float, *, dtype=np.complex128,
                     backend: str | None = None) -> AggregatedField:
    """Aggregate while holding one slice and one accumulator in memory."""
    return aggregate_stream_multi(stream, [s], dtype=dtype, backend=backend)[0]


def aggregate_stream_multi(stream: BinSliceStream, s_values: Sequence[float], *,
                           dtype=np.complex128, backend: str | None = None) -> list[AggregatedField]:
    s_values = _s_list(s_values)
    acc = accumulate_stream(stream, s_values, dtype=dtype, backend=backend)
    return _fields(acc, stream.grid, s_values, stream.falloff_k)


def accumulate_stream(stream, s_values, *, dtype=np.complex128, backend=None) -> np.ndarray:
    s_values = _s_list(s_values)
    kernels = get_backend(backend)
    grid = stream.grid
    w_re, w_im = _weight_table(stream.nt, stream.bin_length, stream.falloff_k, s_values)
    acc = _new_accumulator(len(s_values), grid, dtype)
    out = _real_view(acc)
    received = 0
    for tau in stream:
        if received >= stream.nt:
            raise StreamError(f"stream yielded more than the declared {stream.nt} slices")
        tau = np.asarray(tau)
        if tau.shape != grid.shape:
            raise StreamError(
                f"slice {received} has shape {tau.shape}, expected {grid.shape}"
            )
        if received == 0:
            track("slice", tau)
        kernels.accumulate_slice(tau, w_re[:, received].copy(), w_im[:, received].copy(), out)
        received += 1
    if received != stream.nt:
        raise StreamError(f"stream ended early: expected {stream.nt} slices, received {received}")
    return acc


def fdh_omega(s: float) -> float:
    """Frequency parameter omega = 1 / (4 pi s^2) of the per-photon phase."""
    return 1.0 / (4.0 * math.pi * s * s)


def event_weights(tof_path: np.ndarray, k: int, s_values: Sequence[float]):
    """Per-photon complex weights ``r^k exp(-pi i omega r^2)``, r = tof_path / 2.

    Returns real and imaginary parts as ``(len(s_values), len(tof_path))`` arrays.
    """
    r = np.asarray(tof_path, dtype=np.float64) * 0.5
    rk = r**k
    r2 = r * r
    w_re = np.empty((len(s_values), len(r)))
    w_im = np.empty_like(w_re)
    for q, s in enumerate(s_values):
        phase = math.pi * fdh_omega(s) * r2
        w_re[q] = rk * np.cos(phase)
        w_im[q] = -(rk * np.sin(phase))
    return w_re, w_im


def aggregate_events(events, s: float, *, dtype=np.complex128, chunk_size: int = 4096,
                     backend: str | None = None) -> AggregatedField:
    """Accumulate photon events into phi(x; s) in a single pass."""
    return aggregate_events_multi(events, [s], dtype=dtype, chunk_size=chunk_size,
                                  backend=backend)[0]


def aggregate_events_multi(events, s_values: Sequence[float], *, dtype=np.complex128,
                           chunk_size: int = 4096, backend: str | None = None
                           ) -> list[AggregatedField]:
    """Single pass over an event source, one accumulator per ``s``.

    ``events`` is a :class:`~qfnlos.core.PhotonEventList` or any object with
    ``grid``, ``falloff_k`` and a ``chunks(size)`` method yielding
    ``(pixel_i, pixel_j, tof_path)`` arrays in acquisition order.
    """
    s_values = _s_list(s_values)
    acc = accumulate_events(events, s_values, dtype=dtype, chunk_size=chunk_size, backend=backend)
    return _fields(acc, events.grid, s_values, events.falloff_k)


def accumulate_events(events, s_values, *, dtype=np.complex128, chunk_size=4096,
                      backend=None) -> np.ndarray:
    s_values = _s_list(s_values)
    kernels = get_backend(backend)
    grid, k = events.grid, check_falloff(events.falloff_k)
    acc = _new_accumulator(len(s_values), grid, dtype)
    out = _real_view(acc)
    seen = 0
    for pi, pj, tof in events.chunks(chunk_size):
        pi = np.ascontiguousarray(pi, dtype=np.int64)
        pj = np.ascontiguousarray(pj, dtype=np.int64)
        tof = np.asarray(tof, dtype=np.float64)
        validate_events(grid, pi, pj, tof, offset=seen)
        w_re, w_im = event_weights(tof, k, s_values)
        track("event_chunk", len(tof), 8 + 8 + 8)
        track("event_weights", w_re.size * 2, 8)
        track("event_weight_tmp", len(tof) * 4, 8)
        kernels.scatter_events(pi, pj, w_re, w_im, out)
        seen += len(tof)
    return acc
