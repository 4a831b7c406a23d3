"""Scaling and memory measurements for the three acquisition regimes.

Timing assertions elsewhere only use log-log slopes; absolute seconds are
reported but never compared. Memory figures come from the explicit
:class:`~qfnlos.ledger.MemoryLedger`, not from the operating system.
"""
from __future__ import annotations

import csv
import io
import math
import os
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._backend import available_backends, get_backend
from .aggregation import accumulate_events, accumulate_time
from .core import QFError, SceneSurfels, WallGrid
from .forward import render_events, render_histogram
from .io_formats import LAYOUT_TXY, open_bin_stream, write_histogram
from .ledger import MemoryLedger
from .pipeline import (
    MODES,
    PipelineOptions,
    reconstruct_events,
    reconstruct_histogram,
    reconstruct_stream,
)

WALL_EXTENT = 1.0
DEFAULT_S = 0.05
DEFAULT_DS = 0.002
PHOTONS_PER_PIXEL = 2.0
# histogram-holding runs above this many bytes are skipped
DEFAULT_MEMORY_CAP = 1 << 30

# buffers whose size does not grow with N
CONSTANT_BUFFERS = frozenset({
    "event_chunk", "event_weights", "event_weight_tmp", "event_read_buffer",
    "extract_block_tmp",
})

FDH_REFERENCE_N = 512
FDH_REFERENCE_BYTES = 5 * 2**20


class MemoryCapExceeded(QFError, AssertionError):
    """A ledger total or buffer size broke its mode-specific cap."""


def scaling_scene() -> SceneSurfels:
    """Fixed three-surfel scene in physical units; grids scale, the scene does not."""
    return SceneSurfels(
        np.array([[0.0, 0.0, 0.5], [0.2, -0.15, 0.7], [-0.25, 0.1, 0.9]]),
        np.array([1.0, 0.7, 0.5]),
    )


def scaling_grid(n: int) -> WallGrid:
    return WallGrid.centered(n, WALL_EXTENT)


def bin_length_for(n: int, nt: int) -> float:
    # time window just covers the farthest surfel from the farthest wall corner
    return 2.0 * 1.6 / nt


def fit_slope(sizes: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(values) against log(sizes)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    if len(x) < 2:
        raise ValueError("need at least two points to fit a slope")
    return float(np.polyfit(x, y, 1)[0])


def scaling_bytes(ledger: MemoryLedger) -> int:
    """Ledger total without the constant-size workspaces."""
    return sum(e.bytes for e in ledger.entries if e.name not in CONSTANT_BUFFERS)


def memory_cap(mode: str, n: int, dtype=np.complex64) -> int | None:
    """Total-bytes cap for a mode; ``None`` when the mode has no total cap.

    The fdh cap is 5 MiB at N=512 with 8-byte complex storage and scales
    with N^2 and the element size.
    """
    if mode != "fdh":
        return None
    scale = (n / FDH_REFERENCE_N) ** 2 * np.dtype(dtype).itemsize / 8
    return int(FDH_REFERENCE_BYTES * scale)


def check_caps(ledger: MemoryLedger, mode: str, n: int, dtype=np.complex64, nt: int | None = None) -> None:
    nt = n if nt is None else nt
    problems = []
    cap = memory_cap(mode, n, dtype)
    if cap is not None and ledger.total_bytes >= cap:
        problems.append(f"total {ledger.total_bytes} B >= cap {cap} B")
    if mode == "loading":
        limit = n * n * 16 + n * n * 8
        for e in ledger.entries:
            if e.bytes > limit:
                problems.append(f"buffer {e.name} holds {e.bytes} B > {limit} B")
    if mode in ("loading", "fdh"):
        for e in ledger.entries:
            if e.elements >= n * n * nt:
                problems.append(f"buffer {e.name} has {e.elements} elements >= N^2 * nt")
    if problems:
        raise MemoryCapExceeded(
            f"{mode} N={n}: " + "; ".join(problems) + "\n" + ledger.summary()
        )


@dataclass
class _Inputs:
    mode: str
    n: int
    nt: int
    hist: object = None
    path: str | None = None
    events: object = None


def _prepare(mode: str, n: int, nt: int, tmpdir: str, seed: int = 0) -> _Inputs:
    scene, grid = scaling_scene(), scaling_grid(n)
    bl = bin_length_for(n, nt)
    inp = _Inputs(mode, n, nt)
    if mode == "fdh":
        inp.events = render_events(scene, grid, 2, PHOTONS_PER_PIXEL, rng_seed=seed)
        return inp
    hist = render_histogram(scene, grid, nt, bl, 2)
    if mode == "traditional":
        inp.hist = hist
    else:
        path = os.path.join(tmpdir, f"bench_{n}_{nt}.qfh")
        write_histogram(path, hist, dtype=np.float32, layout=LAYOUT_TXY)
        inp.path = path
    return inp


def _run_once(inp: _Inputs, opts: PipelineOptions, ds: float):
    if inp.mode == "traditional":
        return reconstruct_histogram(inp.hist, DEFAULT_S, ds=ds, opts=opts)
    if inp.mode == "loading":
        return reconstruct_stream(open_bin_stream(inp.path), DEFAULT_S, ds=ds, opts=opts)
    return reconstruct_events(inp.events, DEFAULT_S, ds=ds, opts=opts)


def _footprint(mode: str, n: int, nt: int) -> int:
    # rough bytes the benchmark itself needs to prepare and run one size
    if mode == "fdh":
        return int(n * n * (64 + PHOTONS_PER_PIXEL * 3 * 24))
    return n * n * nt * 8 * 3


@dataclass
class ScalingRow:
    n: int
    mode: str
    stage: str
    median_seconds: float
    mean_seconds: float
    ledger_bytes: int
    scaling_bytes: int
    repeats: int
    skipped: bool = False
    note: str = ""


@dataclass
class ScalingReport:
    rows: list[ScalingRow] = field(default_factory=list)
    threads: int = 1
    dtype: str = "complex64"

    def select(self, mode: str, stage: str) -> list[ScalingRow]:
        return [r for r in self.rows if r.mode == mode and r.stage == stage and not r.skipped]

    def slope(self, mode: str, stage: str) -> float:
        rows = self.select(mode, stage)
        return fit_slope([r.n for r in rows], [r.median_seconds for r in rows])

    def bytes_slope(self, mode: str) -> float:
        rows = self.select(mode, "total")
        return fit_slope([r.n for r in rows], [r.scaling_bytes for r in rows])

    def slopes(self) -> dict[tuple[str, str], float]:
        out = {}
        for key in sorted({(r.mode, r.stage) for r in self.rows if not r.skipped}):
            if len(self.select(*key)) >= 2:
                out[key] = self.slope(*key)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "mode", "stage", "median_seconds", "mean_seconds",
                    "ledger_bytes", "scaling_bytes", "repeats", "skipped", "note"])
        for r in self.rows:
            w.writerow([r.n, r.mode, r.stage, f"{r.median_seconds:.6g}", f"{r.mean_seconds:.6g}",
                        r.ledger_bytes, r.scaling_bytes, r.repeats, int(r.skipped), r.note])
        w.writerow([])
        w.writerow(["mode", "stage", "slope"])
        for (mode, stage), value in self.slopes().items():
            w.writerow([mode, stage, f"{value:.4f}"])
        for mode in sorted({r.mode for r in self.rows if not r.skipped}):
            if len(self.select(mode, "total")) >= 2:
                w.writerow([mode, "ledger_bytes", f"{self.bytes_slope(mode):.4f}"])
        return buf.getvalue()


STAGES = ("aggregate", "deconvolve", "extract", "reconstruct", "total")


def run_scaling(modes: Iterable[str], sizes: Sequence[int], repeats: int = 5, *,
                dtype=np.complex64, nt: int | None = None,
                memory_cap_bytes: int = DEFAULT_MEMORY_CAP, backend: str | None = None,
                log=None) -> ScalingReport:
    """Time every mode over ascending power-of-two sizes.

    ``reconstruct`` is deconvolution plus extraction, i.e. the work left
    once acquisition has produced the aggregated fields. Rows whose inputs
    would exceed ``memory_cap_bytes`` are recorded as skipped.
    """
    sizes = [int(n) for n in sizes]
    if repeats < 5:
        raise ValueError(f"repeats must be >= 5, got {repeats}")
    if sizes != sorted(sizes) or any(n < 1 or n & (n - 1) for n in sizes):
        raise ValueError(f"sizes must be ascending powers of two, got {sizes}")
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}; expected one of {MODES}")
    import scipy.fft

    report = ScalingReport(threads=scipy.fft.get_workers(), dtype=np.dtype(dtype).name)
    opts = PipelineOptions(dtype=dtype, backend=backend)
    with tempfile.TemporaryDirectory(prefix="qfnlos-bench-") as tmpdir:
        for mode in modes:
            for n in sizes:
                n_t = n if nt is None else nt
                if _footprint(mode, n, n_t) > memory_cap_bytes:
                    for stage in STAGES:
                        report.rows.append(ScalingRow(n, mode, stage, math.nan, math.nan, 0, 0,
                                                      0, True, "memory cap"))
                    if log:
                        log(f"{mode} N={n}: skipped (memory cap)")
                    continue
                inp = _prepare(mode, n, n_t, tmpdir)
                samples = {stage: [] for stage in STAGES}
                ledger = MemoryLedger()
                for rep in range(repeats):
                    if rep == 0:
                        with ledger.active():
                            res = _run_once(inp, opts, DEFAULT_DS)
                    else:
                        res = _run_once(inp, opts, DEFAULT_DS)
                    t = res.timings
                    samples["aggregate"].append(t["aggregate"])
                    samples["deconvolve"].append(t["deconvolve"])
                    samples["extract"].append(t["extract"])
                    samples["reconstruct"].append(t["deconvolve"] + t["extract"])
                    samples["total"].append(sum(t.values()))
                for stage in STAGES:
                    v = samples[stage]
                    report.rows.append(ScalingRow(
                        n, mode, stage, statistics.median(v), statistics.fmean(v),
                        ledger.total_bytes, scaling_bytes(ledger), repeats,
                    ))
                if inp.path:
                    os.remove(inp.path)
                if log:
                    log(f"{mode} N={n}: total median {statistics.median(samples['total']):.4g} s, "
                        f"ledger {ledger.total_bytes} B")
    return report


def audit_memory(mode: str, n: int, dtype=np.complex64, *, nt: int | None = None,
                 enforce: bool = True) -> MemoryLedger:
    """Run the pipeline once with registration active and return the ledger.

    With ``enforce`` the mode caps of :func:`check_caps` are asserted.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    n_t = n if nt is None else nt
    ledger = MemoryLedger()
    opts = PipelineOptions(dtype=dtype)
    with tempfile.TemporaryDirectory(prefix="qfnlos-audit-") as tmpdir:
        inp = _prepare(mode, n, n_t, tmpdir)
        with ledger.active():
            _run_once(inp, opts, DEFAULT_DS)
    if enforce:
        check_caps(ledger, mode, n, dtype, n_t)
    return ledger


@dataclass
class BackendTiming:
    kernel: str
    backend: str
    median_seconds: float
    identical: bool


def compare_backends(n: int = 64, nt: int | None = None, repeats: int = 5,
                     dtype=np.complex128) -> list[BackendTiming]:
    """Time the compiled and pure-Python kernels on the same inputs.

    ``identical`` reports bitwise equality with the pure-Python result.
    """
    nt = n if nt is None else nt
    scene, grid = scaling_scene(), scaling_grid(n)
    hist = render_histogram(scene, grid, nt, bin_length_for(n, nt), 2)
    events = render_events(scene, grid, 2, PHOTONS_PER_PIXEL * 4, rng_seed=1)
    s_values = [DEFAULT_S, DEFAULT_S + DEFAULT_DS]
    jobs = {
        "time_aggregation": lambda b: accumulate_time(hist, s_values, dtype=dtype, backend=b),
        "event_scatter": lambda b: accumulate_events(events, s_values, dtype=dtype, backend=b),
    }
    out = []
    for kernel, job in jobs.items():
        ref = job("python")
        for backend in available_backends():
            get_backend(backend)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                res = job(backend)
                times.append(time.perf_counter() - t0)
            out.append(BackendTiming(kernel, backend, statistics.median(times),
                                     bool(np.array_equal(res, ref))))
    return out


def backends_csv(rows: Sequence[BackendTiming]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kernel", "backend", "median_seconds", "identical"])
    for r in rows:
        w.writerow([r.kernel, r.backend, f"{r.median_seconds:.6g}", int(r.identical)])
    return buf.getvalue()
