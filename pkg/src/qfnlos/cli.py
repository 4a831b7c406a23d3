"""Command-line front end.

Every subcommand reads an optional ``key = value`` config file (``--config``)
and then applies its flags on top. Exit codes: 0 success, 1 usage or config
error, 2 data or file-format error, 3 numerical precondition error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import os
import sys
import time
import warnings

import numpy as np
import scipy.fft

from . import benchmark, io_formats
from .aggregation import BinSliceStream, aggregate_events_multi, aggregate_stream_multi, aggregate_time_multi
from .core import DataError, ParameterError, QFError, WallGrid
from .deconvolution import PADDING_MODES, DeconvOptions
from .extraction import ESTIMATORS, RangeWarning, wiener_post_filter
from .forward import DEPOSIT_MODES, RenderOptions, SyntheticEventSource, load_scene, render_histogram
from .ledger import MemoryLedger
from .pipeline import (
    MODES,
    PipelineOptions,
    reconstruct_events,
    reconstruct_histogram,
    reconstruct_stream,
    sharpness,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"{stage}: {err}")
        self.stage = stage
        self.original = err


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _grid_value(text: str) -> tuple:
    parts = text.replace(",", " ").split()
    if len(parts) not in (3, 5):
        raise ValueError("grid needs 'nx ny pitch' or 'nx ny pitch origin_x origin_y'")
    return tuple(parts)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise ValueError(f"expected a positive integer, got {text}")
    return v


def _choice(options):
    def conv(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return conv


# key -> converter for values read from a config file
CONFIG_KEYS = {
    "scene": str,
    "grid": _grid_value,
    "nt": _positive_int,
    "bin_length": float,
    "k": int,
    "s": float,
    "s_list": _float_list,
    "ds": float,
    "d_max": float,
    "mode": _choice(MODES),
    "padding": _choice(PADDING_MODES),
    "albedo_threshold": float,
    "estimator": _choice(ESTIMATORS),
    "noise": float,
    "wiener": float,
    "seed": int,
    "deposit": _choice(DEPOSIT_MODES),
    "photons": float,
    "precision": _choice(("single", "double")),
    "layout": int,
    "input": str,
    "output": str,
    "events_output": str,
    "backend": _choice(("compiled", "python")),
}

DEFAULTS = {
    "k": 2,
    "padding": "full",
    "albedo_threshold": 0.1,
    "estimator": "phase_ratio",
    "seed": 0,
    "deposit": "linear-split",
    "precision": "double",
    "layout": io_formats.LAYOUT_XYT,
    "photons": 100.0,
}


def parse_config_text(text: str, source: str = "config") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source} line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source} line {lineno}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](raw)
        except ValueError as exc:
            raise UsageError(f"{source} line {lineno}: bad value for {key}: {exc}") from None
    return values


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add(p, key, *flags, **kw):
    # every config-backed flag defaults to None so that "not given" is visible
    name = "--" + key.replace("_", "-")
    p.add_argument(name, *flags, dest=key, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--threads", type=int, default=None,
                        help="cap on FFT worker threads")
    common.add_argument("--timing-csv", action="store_true",
                        help="print stage timings as a 'stage,name,seconds' CSV block")

    parser = _Parser(prog="qfnlos", description="Two-dimensional NLOS reconstruction tools.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def grid_flag(p):
        _add(p, "grid", nargs="+", metavar="V", help="nx ny pitch [origin_x origin_y]; centered if no origin")

    def recon_flags(p):
        _add(p, "mode", choices=MODES)
        _add(p, "ds", type=float, help="second s minus first; derived from d_max when omitted")
        _add(p, "d_max", type=float, help="largest expected depth (m)")
        _add(p, "padding", choices=PADDING_MODES)
        _add(p, "albedo_threshold", type=float)
        _add(p, "estimator", choices=ESTIMATORS)
        _add(p, "wiener", type=float, help="Wiener noise-to-signal ratio for the albedo preview")
        _add(p, "precision", choices=("single", "double"))
        _add(p, "backend", choices=("compiled", "python"))

    p = sub.add_parser("render", parents=[common], help="simulate a transient histogram")
    _add(p, "scene", help="surfel list, one 'x y z albedo' per line")
    grid_flag(p)
    _add(p, "nt", type=int)
    _add(p, "bin_length", type=float)
    _add(p, "k", type=int)
    _add(p, "deposit", choices=DEPOSIT_MODES)
    _add(p, "noise", type=float, help="Poisson exposure scale; omit for noise-free")
    _add(p, "seed", type=int)
    _add(p, "precision", choices=("single", "double"))
    _add(p, "layout", type=int, choices=(0, 1))
    _add(p, "output", "-o", help="histogram file")
    _add(p, "events_output", help="also write a photon event file")
    _add(p, "photons", type=float, help="mean photons for the brightest surfel/pixel pair")

    p = sub.add_parser("aggregate", parents=[common], help="histogram or events -> field file(s)")
    _add(p, "input", "-i")
    _add(p, "s_list", nargs="+", type=float, metavar="S")
    _add(p, "s", type=float)
    _add(p, "mode", choices=MODES)
    _add(p, "precision", choices=("single", "double"))
    _add(p, "backend", choices=("compiled", "python"))
    _add(p, "output", "-o", help="field file; with several s values, a prefix")

    p = sub.add_parser("reconstruct", parents=[common], help="histogram or events -> albedo/depth")
    _add(p, "input", "-i")
    _add(p, "s", type=float)
    recon_flags(p)
    _add(p, "output", "-o", help="output prefix")

    p = sub.add_parser("pipeline", parents=[common], help="render and reconstruct in one go")
    _add(p, "scene")
    grid_flag(p)
    _add(p, "nt", type=int)
    _add(p, "bin_length", type=float)
    _add(p, "k", type=int)
    _add(p, "deposit", choices=DEPOSIT_MODES)
    _add(p, "noise", type=float)
    _add(p, "seed", type=int)
    _add(p, "photons", type=float)
    _add(p, "s", type=float)
    recon_flags(p)
    _add(p, "output", "-o", help="output prefix")

    p = sub.add_parser("sweep", parents=[common], help="reconstruct over several s values")
    _add(p, "input", "-i")
    _add(p, "s_list", nargs="+", type=float, metavar="S")
    recon_flags(p)
    _add(p, "output", "-o", help="output prefix; the summary goes to <prefix>_sweep.csv")

    p = sub.add_parser("bench", parents=[common], help="scaling and memory benchmarks")
    p.add_argument("--modes", nargs="+", default=["traditional", "loading", "fdh"], choices=MODES)
    p.add_argument("--sizes", nargs="+", type=int, default=[32, 64, 128, 256])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dtype", choices=("complex64", "complex128"), default="complex64")
    p.add_argument("--memory-cap", type=float, default=1024.0, help="MiB per benchmark input")
    p.add_argument("--audit", action="store_true", help="also audit fdh memory at N=512")
    p.add_argument("--backends", action="store_true", help="also compare kernel backends")
    p.add_argument("--output", "-o", help="CSV report path (default: stdout)")

    p = sub.add_parser("transpose", parents=[common], help="rewrite a histogram as streamable layout")
    p.add_argument("input")
    p.add_argument("output")
    return parser


def merge_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    values = dict(DEFAULTS)
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is None:
            continue
        if key == "grid":
            v = _grid_value(" ".join(str(x) for x in v))
        values[key] = v
    return values


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join(missing))


def make_grid(values) -> WallGrid:
    nx, ny, pitch = int(values[0]), int(values[1]), float(values[2])
    if len(values) == 5:
        origin = (float(values[3]), float(values[4]))
    else:
        origin = (-0.5 * (nx - 1) * pitch, -0.5 * (ny - 1) * pitch)
    return WallGrid(nx, ny, pitch, origin)


class Timer:
    def __init__(self, command: str):
        self.command = command
        self.rows: list[tuple[str, float]] = []

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except (QFError, OSError, ValueError) as exc:
            raise StageError(name, exc) from exc
        finally:
            self.rows.append((name, time.perf_counter() - t0))

    def add(self, name: str, seconds: float) -> None:
        self.rows.append((name, seconds))

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "name", "seconds"])
        for name, sec in self.rows:
            w.writerow([self.command, name, f"{sec:.6f}"])
        return buf.getvalue()


def _complex_dtype(cfg):
    return np.complex64 if cfg["precision"] == "single" else np.complex128


def _pipeline_options(cfg) -> PipelineOptions:
    return PipelineOptions(
        deconv=DeconvOptions(padding=cfg["padding"]),
        albedo_rel_threshold=cfg["albedo_threshold"],
        estimator=cfg["estimator"],
        dtype=_complex_dtype(cfg),
        backend=cfg.get("backend"),
    )


def _sniff(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read(8)
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None


def _mode_for(cfg, magic: bytes) -> str:
    mode = cfg.get("mode")
    if magic == io_formats.EVENT_MAGIC:
        if mode not in (None, "fdh"):
            raise UsageError(f"an event file can only be used with mode=fdh, not {mode}")
        return "fdh"
    if magic == io_formats.HIST_MAGIC:
        if mode == "fdh":
            raise UsageError("mode=fdh needs an event file, got a histogram")
        return mode or "traditional"
    raise io_formats.BadMagicError(f"unrecognized input file (magic {magic!r})", 0)


def _reconstruct_file(path, s, cfg, mode):
    opts = _pipeline_options(cfg)
    kw = dict(ds=cfg.get("ds"), d_max=cfg.get("d_max"), opts=opts)
    if mode == "fdh":
        return reconstruct_events(io_formats.open_events(path), s, **kw)
    if mode == "loading":
        return reconstruct_stream(io_formats.open_bin_stream(path), s, **kw)
    return reconstruct_histogram(io_formats.read_histogram(path), s, **kw)


def _write_outputs(prefix: str, result, cfg, out) -> None:
    rec = result.reconstruction
    io_formats.write_reconstruction(prefix + ".qfr", rec)
    albedo = np.asarray(rec.albedo)
    if cfg.get("wiener"):
        albedo = wiener_post_filter(albedo, cfg["wiener"])
    io_formats.write_image_pgm(prefix + "_albedo.pgm", albedo, "percentile", 99.0)
    io_formats.write_image_pgm(prefix + "_depth.pgm", rec.depth, "percentile", 99.0)
    io_formats.write_image_pgm(prefix + "_mask.pgm", rec.valid.astype(np.float64), "max")
    print(f"wrote {prefix}.qfr and {prefix}_{{albedo,depth,mask}}.pgm", file=out)


def _report(result, out) -> None:
    print(f"s1 = {result.s1:.8g}  s2 = {result.s2:.8g}  ds = {result.ds:.8g}"
          + (f"  (from d_max = {result.d_max:.6g})" if result.d_max is not None else ""), file=out)
    if result.sampling.aliased:
        print(f"warning: chirp kernel undersampled (max phase step "
              f"{result.sampling.max_phase_step:.3g} rad > pi)", file=out)
    for name, sec in result.timings.items():
        print(f"  {name:<12s}{sec:10.4f} s", file=out)


def _peak_summary(rec, out) -> None:
    albedo = np.asarray(rec.albedo)
    i, j = np.unravel_index(int(np.argmax(albedo)), albedo.shape)
    print(f"peak albedo {albedo[i, j]:.6g} at pixel ({i}, {j}), depth {rec.depth[i, j]:.6g} m",
          file=out)


def cmd_render(cfg, timer, out) -> None:
    _require(cfg, "scene", "grid", "nt", "bin_length", "output")
    grid = make_grid(cfg["grid"])
    with timer.stage("load_scene"):
        scene = load_scene(cfg["scene"])
    opts = RenderOptions(deposit=cfg["deposit"], exposure_scale=cfg.get("noise"), rng_seed=cfg["seed"])
    with timer.stage("render"):
        hist, report = render_histogram(scene, grid, cfg["nt"], cfg["bin_length"], cfg["k"], opts,
                                        return_report=True)
    print(report, file=out)
    storage = np.float32 if cfg["precision"] == "single" else np.float64
    with timer.stage("write"):
        io_formats.write_histogram(cfg["output"], hist, dtype=storage, layout=cfg["layout"])
    print(f"wrote {cfg['output']} ({grid.nx}x{grid.ny}x{hist.nt}, layout {cfg['layout']})", file=out)
    if cfg.get("events_output"):
        src = SyntheticEventSource(scene, grid, cfg["k"], cfg["photons"], cfg["seed"])
        with timer.stage("events"), io_formats.EventWriter(cfg["events_output"], grid, cfg["k"]) as w:
            for pi, pj, tof in src.chunks(65536):
                w.write(pi, pj, tof)
        print(f"wrote {cfg['events_output']} ({w.count} events)", file=out)


def cmd_aggregate(cfg, timer, out) -> None:
    _require(cfg, "input", "output")
    s_values = cfg.get("s_list") or ([cfg["s"]] if cfg.get("s") is not None else None)
    if not s_values:
        raise UsageError("missing required setting: s (or s_list)")
    path = cfg["input"]
    mode = _mode_for(cfg, _sniff(path))
    dtype = _complex_dtype(cfg)
    with timer.stage("aggregate"):
        if mode == "fdh":
            fields = aggregate_events_multi(io_formats.open_events(path), s_values, dtype=dtype,
                                            backend=cfg.get("backend"))
        elif mode == "loading":
            fields = aggregate_stream_multi(io_formats.open_bin_stream(path), s_values, dtype=dtype,
                                            backend=cfg.get("backend"))
        else:
            fields = aggregate_time_multi(io_formats.read_histogram(path), s_values, dtype=dtype,
                                          backend=cfg.get("backend"))
    with timer.stage("write"):
        if len(fields) == 1:
            names = [cfg["output"]]
        else:
            names = [f"{cfg['output']}_{q}.qff" for q in range(len(fields))]
        for name, phi in zip(names, fields):
            io_formats.write_field(name, phi)
            print(f"wrote {name} (s = {phi.s:.8g})", file=out)


def _run_reconstruction(cfg, timer, out, runner):
    ledger = MemoryLedger()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RangeWarning)
        with timer.stage("reconstruct"), ledger.active():
            result = runner()
    for w in caught:
        print(f"warning: {w.message}", file=out)
    for name, sec in result.timings.items():
        timer.add(name, sec)
    _report(result, out)
    print(ledger.summary(), file=out)
    _peak_summary(result.reconstruction, out)
    return result


def cmd_reconstruct(cfg, timer, out) -> None:
    _require(cfg, "input", "s", "output")
    path = cfg["input"]
    mode = _mode_for(cfg, _sniff(path))
    print(f"mode {mode}", file=out)
    result = _run_reconstruction(cfg, timer, out, lambda: _reconstruct_file(path, cfg["s"], cfg, mode))
    with timer.stage("write"):
        _write_outputs(cfg["output"], result, cfg, out)


def _farthest_return(scene, grid) -> float:
    # the largest surfel distance is reached at one of the wall corners
    x, y = grid.coordinates()
    corners = np.array([(cx, cy, 0.0) for cx in (x[0], x[-1]) for cy in (y[0], y[-1])])
    diff = scene.positions[:, None, :] - corners[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=-1)).max())


def cmd_pipeline(cfg, timer, out) -> None:
    _require(cfg, "scene", "grid", "s", "output")
    mode = cfg.get("mode") or "traditional"
    grid = make_grid(cfg["grid"])
    with timer.stage("load_scene"):
        scene = load_scene(cfg["scene"])
    if mode == "fdh":
        source = SyntheticEventSource(scene, grid, cfg["k"], cfg["photons"], cfg["seed"])
        if cfg.get("d_max") is None and cfg.get("ds") is None and len(scene):
            cfg = dict(cfg, d_max=_farthest_return(scene, grid))
        opts = _pipeline_options(cfg)
        runner = lambda: reconstruct_events(source, cfg["s"], ds=cfg.get("ds"), d_max=cfg.get("d_max"),
                                            opts=opts)
        result = _run_reconstruction(cfg, timer, out, runner)
    else:
        _require(cfg, "nt", "bin_length")
        ropts = RenderOptions(deposit=cfg["deposit"], exposure_scale=cfg.get("noise"), rng_seed=cfg["seed"])
        with timer.stage("render"):
            hist, report = render_histogram(scene, grid, cfg["nt"], cfg["bin_length"], cfg["k"], ropts,
                                            return_report=True)
        print(report, file=out)
        opts = _pipeline_options(cfg)
        kw = dict(ds=cfg.get("ds"), d_max=cfg.get("d_max"), opts=opts)
        if mode == "loading":
            stream = BinSliceStream.from_histogram(hist)
            result = _run_reconstruction(cfg, timer, out,
                                         lambda: reconstruct_stream(stream, cfg["s"], **kw))
        else:
            result = _run_reconstruction(cfg, timer, out,
                                         lambda: reconstruct_histogram(hist, cfg["s"], **kw))
    with timer.stage("write"):
        _write_outputs(cfg["output"], result, cfg, out)


SWEEP_COLUMNS = ["s", "ds", "peak_albedo", "peak_sharpness", "aliased", "status"]


def cmd_sweep(cfg, timer, out) -> None:
    _require(cfg, "input", "s_list", "output")
    path = cfg["input"]
    mode = _mode_for(cfg, _sniff(path))
    rows = []
    for idx, s in enumerate(cfg["s_list"]):
        prefix = f"{cfg['output']}_s{idx}"
        print(f"-- s = {s:.8g} ({prefix})", file=out)
        try:
            result = _run_reconstruction(cfg, timer, out, lambda: _reconstruct_file(path, s, cfg, mode))
            _write_outputs(prefix, result, cfg, out)
            albedo = np.asarray(result.reconstruction.albedo)
            rows.append([f"{s:.8g}", f"{result.ds:.8g}", f"{float(albedo.max()):.6g}",
                         f"{sharpness(albedo):.6g}", int(result.sampling.aliased), "ok"])
        except (StageError, QFError, OSError, ValueError) as exc:
            print(f"s = {s:.8g} failed: {exc}", file=out)
            rows.append([f"{s:.8g}", "", "", "", "", f"error: {exc}".replace("\n", " ")])
    csv_path = cfg["output"] + "_sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)
    print(f"wrote {csv_path}", file=out)


def cmd_bench(args, timer, out) -> None:
    dtype = np.dtype(args.dtype)
    with timer.stage("scaling"):
        report = benchmark.run_scaling(
            args.modes, args.sizes, args.repeats, dtype=dtype,
            memory_cap_bytes=int(args.memory_cap * 2**20),
            log=lambda msg: print(msg, file=sys.stderr),
        )
    text = report.to_csv()
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
        print(f"wrote {args.output}", file=out)
    else:
        print(text, file=out, end="")
    print(f"threads: {report.threads}", file=out)
    if args.audit:
        with timer.stage("audit"):
            for dt in (np.complex64, np.complex128):
                ledger = benchmark.audit_memory("fdh", 512, dt, enforce=False)
                cap = benchmark.memory_cap("fdh", 512, dt)
                print(f"fdh N=512 {np.dtype(dt).name}: {ledger.total_bytes} B "
                      f"({ledger.total_bytes / 2**20:.3f} MiB), cap {cap / 2**20:.0f} MiB", file=out)
    if args.backends:
        with timer.stage("backends"):
            print(benchmark.backends_csv(benchmark.compare_backends()), file=out, end="")


def cmd_transpose(args, timer, out) -> None:
    with timer.stage("transpose"):
        io_formats.transpose_histogram_file(args.input, args.output)
    print(f"wrote {args.output} (layout 1)", file=out)


COMMANDS = {
    "render": cmd_render,
    "aggregate": cmd_aggregate,
    "reconstruct": cmd_reconstruct,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
}


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, StageError):
        exc = exc.original
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, ParameterError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    timer = Timer(args.command)
    workers = args.threads if args.threads else os.cpu_count() or 1
    try:
        with scipy.fft.set_workers(workers):
            if args.command == "bench":
                cmd_bench(args, timer, out)
            elif args.command == "transpose":
                cmd_transpose(args, timer, out)
            else:
                COMMANDS[args.command](merge_config(args), timer, out)
    except (UsageError, StageError, QFError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    if args.timing_csv:
        print(timer.csv(), file=out, end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
