"""Binary file formats. Little-endian throughout; no compression.

Histogram (``.qfh``), 68-byte header then the payload::

    magic      8s   b"QFNLOSH\\0"
    version    u32  1
    nx ny nt   u32 x3
    pitch      f64  m
    origin_x   f64  m
    origin_y   f64  m
    bin_length f64  m
    falloff_k  u32
    dtype      u32  0 = f32, 1 = f64
    layout     u32  0 = [x][y][t], 1 = [t][x][y] (streamable)

Events (``.qfe``), 56-byte header then 16-byte records ``(u32 i, u32 j, f64 tof_path)``::

    magic b"QFNLOSE\\0", version u32, nx u32, ny u32, pitch f64, origin_x f64,
    origin_y f64, falloff_k u32, event_count u64

Complex field (``.qff``), header then interleaved (re, im) row-major payload::

    magic b"QFNLOSF\\0", version u32, nx u32, ny u32, pitch f64, origin_x f64,
    origin_y f64, s f64, falloff_k u32, dtype u32 (0 = complex64, 1 = complex128)

Reconstruction (``.qfr``), header then albedo, depth (dtype) and mask (u8)::

    magic b"QFNLOSR\\0", version u32, nx u32, ny u32, pitch f64, origin_x f64,
    origin_y f64, dtype u32 (0 = f32, 1 = f64)

Previews are 16-bit binary PGM (P5, maxval 65535, big-endian samples), one
image row per first-axis index.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .aggregation import BinSliceStream
from .core import (
    AggregatedField,
    DataError,
    PhotonEventList,
    Reconstruction,
    TransientHistogram,
    WallGrid,
    validate_events,
)
from .ledger import track

VERSION = 1

HIST_MAGIC = b"QFNLOSH\0"
EVENT_MAGIC = b"QFNLOSE\0"
FIELD_MAGIC = b"QFNLOSF\0"
RECON_MAGIC = b"QFNLOSR\0"

_HIST = struct.Struct("<8sIIIIddddIII")
_EVENT = struct.Struct("<8sIIIdddIQ")
_FIELD = struct.Struct("<8sIIIddddII")
_RECON = struct.Struct("<8sIIIdddI")

EVENT_RECORD = np.dtype([("i", "<u4"), ("j", "<u4"), ("tof", "<f8")])

LAYOUT_XYT = 0
LAYOUT_TXY = 1

_REAL_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_COMPLEX_DTYPES = {0: np.dtype("<c8"), 1: np.dtype("<c16")}


class FormatError(DataError):
    """A file does not conform to its format; ``offset`` is the byte position at fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class UnknownDTypeError(FormatError):
    pass


class TruncatedError(FormatError):
    def __init__(self, message: str, offset: int, expected: int, actual: int):
        super().__init__(f"{message}: expected {expected} bytes, found {actual}", offset)
        self.expected = expected
        self.actual = actual


class LayoutError(FormatError):
    pass


def _dtype_code(dtype, table) -> int:
    dtype = np.dtype(dtype).newbyteorder("<")
    for code, dt in table.items():
        if dt == dtype:
            return code
    raise DataError(f"unsupported dtype {dtype}")


def _read_header(fh, st: struct.Struct, magic: bytes, what: str) -> tuple:
    raw = fh.read(st.size)
    if len(raw) < 8 or raw[:8] != magic:
        raise BadMagicError(f"not a {what} file: bad magic {raw[:8]!r}", 0)
    if len(raw) < st.size:
        raise TruncatedError(f"{what} header truncated", len(raw), st.size, len(raw))
    fields = st.unpack(raw)
    if fields[1] != VERSION:
        raise VersionError(f"{what} version {fields[1]} unsupported (expected {VERSION})", 8)
    return fields


def _check_size(path, header_size: int, payload: int, what: str) -> None:
    actual = os.path.getsize(path) - header_size
    if actual != payload:
        raise TruncatedError(
            f"{what} payload size mismatch", header_size, header_size + payload,
            header_size + actual,
        )


# -- histograms ---------------------------------------------------------------

@dataclass(frozen=True)
class HistogramHeader:
    grid: WallGrid
    nt: int
    bin_length: float
    falloff_k: int
    dtype: np.dtype
    layout: int

    @property
    def payload_bytes(self) -> int:
        return self.grid.nx * self.grid.ny * self.nt * self.dtype.itemsize


def write_histogram(path, hist: TransientHistogram, *, dtype=None, layout: int = LAYOUT_XYT) -> None:
    """Write ``hist``; ``dtype`` defaults to the histogram's own (f32 or f64)."""
    dtype = np.dtype(dtype or hist.data.dtype).newbyteorder("<")
    code = _dtype_code(dtype, _REAL_DTYPES)
    if layout not in (LAYOUT_XYT, LAYOUT_TXY):
        raise DataError(f"layout must be 0 or 1, got {layout}")
    g = hist.grid
    with open(path, "wb") as fh:
        fh.write(_HIST.pack(HIST_MAGIC, VERSION, g.nx, g.ny, hist.nt, g.pitch, g.origin[0],
                            g.origin[1], hist.bin_length, hist.falloff_k, code, layout))
        if layout == LAYOUT_XYT:
            fh.write(np.ascontiguousarray(hist.data, dtype=dtype).tobytes())
        else:
            for n in range(hist.nt):
                fh.write(np.ascontiguousarray(hist.data[:, :, n], dtype=dtype).tobytes())


def read_histogram_header(path) -> HistogramHeader:
    with open(path, "rb") as fh:
        f = _read_header(fh, _HIST, HIST_MAGIC, "histogram")
    _, _, nx, ny, nt, pitch, ox, oy, bl, k, code, layout = f
    if code not in _REAL_DTYPES:
        raise UnknownDTypeError(f"unknown histogram dtype code {code}", 60)
    if layout not in (LAYOUT_XYT, LAYOUT_TXY):
        raise LayoutError(f"unknown layout flag {layout}", 64)
    hdr = HistogramHeader(WallGrid(nx, ny, pitch, (ox, oy)), nt, bl, k, _REAL_DTYPES[code], layout)
    _check_size(path, _HIST.size, hdr.payload_bytes, "histogram")
    return hdr


def read_histogram(path) -> TransientHistogram:
    hdr = read_histogram_header(path)
    g = hdr.grid
    with open(path, "rb") as fh:
        fh.seek(_HIST.size)
        payload = np.fromfile(fh, dtype=hdr.dtype, count=g.nx * g.ny * hdr.nt)
    if hdr.layout == LAYOUT_XYT:
        data = payload.reshape(g.nx, g.ny, hdr.nt)
    else:
        data = np.ascontiguousarray(payload.reshape(hdr.nt, g.nx, g.ny).transpose(1, 2, 0))
    return TransientHistogram(g, hdr.bin_length, hdr.falloff_k, data.astype(hdr.dtype.newbyteorder("=")))


class _FileSlices:
    def __init__(self, path, hdr: HistogramHeader):
        self.path = path
        self.hdr = hdr

    def __iter__(self):
        g = self.hdr.grid
        buf = np.empty((g.nx, g.ny), dtype=self.hdr.dtype)
        track("slice", buf)
        nbytes = buf.nbytes
        with open(self.path, "rb") as fh:
            fh.seek(_HIST.size)
            for n in range(self.hdr.nt):
                got = fh.readinto(memoryview(buf).cast("B"))
                if got != nbytes:
                    offset = _HIST.size + n * nbytes
                    raise TruncatedError(f"slice {n} truncated", offset + got, nbytes, got)
                yield buf


def open_bin_stream(path) -> BinSliceStream:
    """Stream a time-major (layout 1) histogram file one slice at a time.

    Only one ``nx x ny`` buffer is ever held; the yielded array is reused, so
    consumers must not keep references across iterations.
    """
    hdr = read_histogram_header(path)
    if hdr.layout != LAYOUT_TXY:
        raise LayoutError(
            f"{path}: layout 0 ([x][y][t]) is not streamable; transpose first "
            "(qfnlos transpose or transpose_histogram_file)", 64,
        )
    return BinSliceStream(hdr.grid, hdr.nt, hdr.bin_length, hdr.falloff_k, _FileSlices(path, hdr))


def transpose_histogram_file(src, dst, *, pixels_per_pass: int | None = None) -> None:
    """Rewrite a layout-0 file as layout 1 without loading the whole cube.

    Reads ``pixels_per_pass`` pixel traces at a time (default: one wall row).
    """
    hdr = read_histogram_header(src)
    g, nt, dt = hdr.grid, hdr.nt, hdr.dtype
    if hdr.layout == LAYOUT_TXY:
        with open(src, "rb") as fi, open(dst, "wb") as fo:
            fo.write(fi.read())
        return
    npix = g.nx * g.ny
    step = pixels_per_pass or g.ny
    with open(src, "rb") as fi, open(dst, "w+b") as fo:
        fo.write(_HIST.pack(HIST_MAGIC, VERSION, g.nx, g.ny, nt, g.pitch, g.origin[0], g.origin[1],
                            hdr.bin_length, hdr.falloff_k, _dtype_code(dt, _REAL_DTYPES),
                            LAYOUT_TXY))
        fo.truncate(_HIST.size + hdr.payload_bytes)
        dst_map = np.memmap(fo, dtype=dt, mode="r+", offset=_HIST.size, shape=(nt, npix))
        fi.seek(_HIST.size)
        for p0 in range(0, npix, step):
            p1 = min(p0 + step, npix)
            block = np.fromfile(fi, dtype=dt, count=(p1 - p0) * nt).reshape(p1 - p0, nt)
            dst_map[:, p0:p1] = block.T
        dst_map.flush()
        del dst_map


# -- events -------------------------------------------------------------------

def write_events(path, events: PhotonEventList) -> None:
    g = events.grid
    rec = np.empty(len(events), dtype=EVENT_RECORD)
    rec["i"] = events.pixel_i
    rec["j"] = events.pixel_j
    rec["tof"] = events.tof_path
    with open(path, "wb") as fh:
        fh.write(_EVENT.pack(EVENT_MAGIC, VERSION, g.nx, g.ny, g.pitch, g.origin[0], g.origin[1],
                             events.falloff_k, len(events)))
        fh.write(rec.tobytes())


class EventWriter:
    """Append events chunk by chunk; the count in the header is patched on close."""

    def __init__(self, path, grid: WallGrid, falloff_k: int):
        self.grid = grid
        self.falloff_k = falloff_k
        self.count = 0
        self._fh = open(path, "wb")
        self._write_header()

    def _write_header(self):
        g = self.grid
        self._fh.write(_EVENT.pack(EVENT_MAGIC, VERSION, g.nx, g.ny, g.pitch, g.origin[0],
                                   g.origin[1], self.falloff_k, self.count))

    def write(self, pixel_i, pixel_j, tof_path) -> None:
        validate_events(self.grid, np.asarray(pixel_i), np.asarray(pixel_j),
                        np.asarray(tof_path), offset=self.count)
        rec = np.empty(len(tof_path), dtype=EVENT_RECORD)
        rec["i"], rec["j"], rec["tof"] = pixel_i, pixel_j, tof_path
        self._fh.write(rec.tobytes())
        self.count += len(rec)

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._write_header()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class EventFile:
    """Lazy reader: exposes ``grid``, ``falloff_k`` and ``chunks()`` like a PhotonEventList."""

    path: str
    grid: WallGrid
    falloff_k: int
    count: int

    def chunks(self, size: int = 65536):
        per = EVENT_RECORD.itemsize
        raw = np.empty(min(size, max(self.count, 1)) * per, dtype=np.uint8)
        track("event_read_buffer", raw)
        with open(self.path, "rb") as fh:
            fh.seek(_EVENT.size)
            done = 0
            while done < self.count:
                m = min(len(raw) // per, self.count - done)
                got = fh.readinto(memoryview(raw)[:m * per])
                if got != m * per:
                    raise TruncatedError("event records truncated", _EVENT.size + done * per + got,
                                         m * per, got)
                rec = raw[:m * per].view(EVENT_RECORD)
                yield rec["i"].astype(np.int64), rec["j"].astype(np.int64), rec["tof"].astype(np.float64)
                done += m

    def __len__(self) -> int:
        return self.count


def open_events(path) -> EventFile:
    with open(path, "rb") as fh:
        f = _read_header(fh, _EVENT, EVENT_MAGIC, "event")
    _, _, nx, ny, pitch, ox, oy, k, count = f
    _check_size(path, _EVENT.size, count * EVENT_RECORD.itemsize, "event")
    return EventFile(str(path), WallGrid(nx, ny, pitch, (ox, oy)), k, count)


def read_events(path) -> PhotonEventList:
    ef = open_events(path)
    with open(path, "rb") as fh:
        fh.seek(_EVENT.size)
        rec = np.fromfile(fh, dtype=EVENT_RECORD, count=ef.count)
    return PhotonEventList(ef.grid, ef.falloff_k, rec["i"].astype(np.int64),
                           rec["j"].astype(np.int64), rec["tof"].astype(np.float64))


# -- complex fields -------------------------------------------------------------

def write_field(path, phi: AggregatedField) -> None:
    code = _dtype_code(phi.data.dtype, _COMPLEX_DTYPES)
    g = phi.grid
    with open(path, "wb") as fh:
        fh.write(_FIELD.pack(FIELD_MAGIC, VERSION, g.nx, g.ny, g.pitch, g.origin[0], g.origin[1],
                             phi.s, phi.falloff_k, code))
        fh.write(np.ascontiguousarray(phi.data, dtype=_COMPLEX_DTYPES[code]).tobytes())


def read_field(path) -> AggregatedField:
    with open(path, "rb") as fh:
        f = _read_header(fh, _FIELD, FIELD_MAGIC, "field")
        _, _, nx, ny, pitch, ox, oy, s, k, code = f
        if code not in _COMPLEX_DTYPES:
            raise UnknownDTypeError(f"unknown field dtype code {code}", 56)
        dt = _COMPLEX_DTYPES[code]
        _check_size(path, _FIELD.size, nx * ny * dt.itemsize, "field")
        data = np.fromfile(fh, dtype=dt, count=nx * ny).reshape(nx, ny)
    return AggregatedField(WallGrid(nx, ny, pitch, (ox, oy)), s,
                           data.astype(dt.newbyteorder("=")), falloff_k=k)


# -- reconstructions ---------------------------------------------------------

def write_reconstruction(path, rec: Reconstruction) -> None:
    dt = np.result_type(rec.albedo.dtype, rec.depth.dtype)
    code = _dtype_code(dt, _REAL_DTYPES)
    dt = _REAL_DTYPES[code]
    g = rec.grid
    with open(path, "wb") as fh:
        fh.write(_RECON.pack(RECON_MAGIC, VERSION, g.nx, g.ny, g.pitch, g.origin[0], g.origin[1], code))
        fh.write(np.ascontiguousarray(rec.albedo, dtype=dt).tobytes())
        fh.write(np.ascontiguousarray(rec.depth, dtype=dt).tobytes())
        fh.write(np.ascontiguousarray(rec.valid, dtype=np.uint8).tobytes())


def read_reconstruction(path) -> Reconstruction:
    with open(path, "rb") as fh:
        f = _read_header(fh, _RECON, RECON_MAGIC, "reconstruction")
        _, _, nx, ny, pitch, ox, oy, code = f
        if code not in _REAL_DTYPES:
            raise UnknownDTypeError(f"unknown reconstruction dtype code {code}", 44)
        dt = _REAL_DTYPES[code]
        n = nx * ny
        _check_size(path, _RECON.size, n * (2 * dt.itemsize + 1), "reconstruction")
        albedo = np.fromfile(fh, dtype=dt, count=n).reshape(nx, ny)
        depth = np.fromfile(fh, dtype=dt, count=n).reshape(nx, ny)
        valid = np.fromfile(fh, dtype=np.uint8, count=n).reshape(nx, ny).astype(bool)
    native = dt.newbyteorder("=")
    return Reconstruction(WallGrid(nx, ny, pitch, (ox, oy)), albedo.astype(native),
                          depth.astype(native), valid)


# -- previews ---------------------------------------------------------------

def normalize_image(values: np.ndarray, normalization: str = "percentile", p: float = 99.0) -> np.ndarray:
    """Map a nonnegative image to uint16 [0, 65535].

    ``"max"`` scales by the maximum; ``"percentile"`` scales by the ``p``-th
    percentile and clips anything above it.
    """
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    v = np.maximum(v, 0.0)
    if normalization == "max":
        top = v.max() if v.size else 0.0
    elif normalization == "percentile":
        top = np.percentile(v, p) if v.size else 0.0
    else:
        raise DataError(f"normalization must be 'max' or 'percentile', got {normalization!r}")
    if top <= 0:
        return np.zeros(v.shape, dtype=np.uint16)
    return np.rint(np.clip(v / top, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_image_pgm(path, values: np.ndarray, normalization: str = "percentile", p: float = 99.0) -> None:
    img = normalize_image(values, normalization, p)
    if img.ndim != 2:
        raise DataError("PGM output needs a 2-D map")
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(img.astype(">u2").tobytes())


def read_image_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 65535:
        raise BadMagicError("not a 16-bit binary PGM", 0)
    cols, rows = int(parts[1]), int(parts[2])
    body = raw[len(raw) - rows * cols * 2:]
    return np.frombuffer(body, dtype=">u2").reshape(rows, cols).astype(np.uint16)
