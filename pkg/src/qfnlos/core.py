"""Domain types, physical constants and wall-grid geometry.

Time of flight is carried as round-trip optical path length in meters
(``c * t``) everywhere, so the speed of light never enters an inner loop.
Bin ``n`` of a histogram covers paths ``[n * bin_length, (n + 1) * bin_length)``
and its quadrature node is the bin center ``(n + 0.5) * bin_length``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SPEED_OF_LIGHT = 299792458.0
FALLOFF_EXPONENTS = (2, 4)


class QFError(Exception):
    """Base class for all package errors."""


class ParameterError(QFError, ValueError):
    """A numerical parameter violates a precondition (s <= 0, k not in {2, 4}, ...)."""


class DataError(QFError, ValueError):
    """Input data is malformed: wrong shape, non-finite values, bad indices."""


class StreamError(DataError):
    """A bin-slice stream delivered the wrong shape or ended early."""


def speed_of_light() -> float:
    """Speed of light in vacuum, m/s."""
    return SPEED_OF_LIGHT


def path_to_time(path):
    """Convert a round-trip optical path (m) to a time of flight (s)."""
    return path / SPEED_OF_LIGHT


def time_to_path(t):
    """Convert a time of flight (s) to a round-trip optical path (m)."""
    return t * SPEED_OF_LIGHT


def check_falloff(k) -> int:
    if isinstance(k, bool) or int(k) != k or int(k) not in FALLOFF_EXPONENTS:
        raise ParameterError(f"falloff exponent k must be 2 or 4, got {k!r}")
    return int(k)


def check_positive(name: str, value) -> float:
    value = float(value)
    if not (math.isfinite(value) and value > 0):
        raise ParameterError(f"{name} must be a positive finite number, got {value!r}")
    return value


def _frozen(arr: np.ndarray) -> np.ndarray:
    # read-only view; the caller's buffer is neither copied nor re-flagged
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class WallGrid:
    """Regular grid of scan points on the relay wall plane z = 0.

    Pixel ``(i, j)`` sits at ``origin + (i * pitch, j * pitch)``.
    """

    nx: int
    ny: int
    pitch: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name in ("nx", "ny"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or int(v) < 1:
                raise ParameterError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        object.__setattr__(self, "pitch", check_positive("pitch", self.pitch))
        ox, oy = (float(c) for c in self.origin)
        if not (math.isfinite(ox) and math.isfinite(oy)):
            raise ParameterError(f"origin must be finite, got {self.origin!r}")
        object.__setattr__(self, "origin", (ox, oy))

    @classmethod
    def centered(cls, n: int, extent: float) -> "WallGrid":
        """Square ``n x n`` grid of side ``extent`` centered on the wall origin."""
        pitch = extent / n
        o = -0.5 * (n - 1) * pitch
        return cls(n, n, pitch, (o, o))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    def pixel_center(self, i, j):
        """Physical (x, y) of pixel (i, j); accepts scalars or arrays."""
        return (self.origin[0] + i * self.pitch, self.origin[1] + j * self.pitch)

    def pixel_index(self, x, y):
        """Nearest pixel index for a physical position; inverse of :meth:`pixel_center`."""
        i = np.rint((np.asarray(x) - self.origin[0]) / self.pitch).astype(np.int64)
        j = np.rint((np.asarray(y) - self.origin[1]) / self.pitch).astype(np.int64)
        if i.ndim == 0:
            return int(i), int(j)
        return i, j

    def contains(self, i, j) -> bool:
        return 0 <= i < self.nx and 0 <= j < self.ny

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """1-D arrays of pixel-center x and y coordinates."""
        return self.pixel_center(np.arange(self.nx), np.arange(self.ny))

    def same_as(self, other: "WallGrid") -> bool:
        return self == other


@dataclass(frozen=True)
class TransientHistogram:
    """Confocal transient measurement tau(x, t) stored as ``data[nx, ny, nt]``."""

    grid: WallGrid
    bin_length: float
    falloff_k: int
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bin_length", check_positive("bin_length", self.bin_length))
        object.__setattr__(self, "falloff_k", check_falloff(self.falloff_k))
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 3 or data.shape[:2] != self.grid.shape or data.shape[2] < 1:
            raise DataError(
                f"histogram shape {data.shape} does not match grid {self.grid.shape} x nt"
            )
        if not np.all(np.isfinite(data)):
            raise DataError("histogram contains non-finite values")
        if np.any(data < 0):
            raise DataError("histogram contains negative values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def nt(self) -> int:
        return self.data.shape[2]

    @property
    def bin_duration(self) -> float:
        """Bin width in seconds."""
        return self.bin_length / SPEED_OF_LIGHT

    @property
    def max_path(self) -> float:
        return self.nt * self.bin_length

    def bin_centers(self) -> np.ndarray:
        """Round-trip path (m) at the center of every bin."""
        return (np.arange(self.nt) + 0.5) * self.bin_length


@dataclass(frozen=True)
class _ComplexField:
    grid: WallGrid
    s: float
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", check_positive("s", self.s))
        data = np.asarray(self.data)
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        elif data.dtype not in (np.complex64, np.complex128):
            data = data.astype(np.complex128)
        if data.shape != self.grid.shape:
            raise DataError(f"field shape {data.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("field contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))


@dataclass(frozen=True)
class AggregatedField(_ComplexField):
    """Time-aggregated complex field phi(x; s)."""

    falloff_k: int = 2

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "falloff_k", check_falloff(self.falloff_k))


@dataclass(frozen=True)
class ModulatedAlbedo(_ComplexField):
    """psi(x; s) = a(x) exp(-i d(x)^2 / 4 s^2)."""


@dataclass(frozen=True)
class Reconstruction:
    grid: WallGrid
    albedo: np.ndarray
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        albedo = np.asarray(self.albedo)
        depth = np.asarray(self.depth)
        valid = np.asarray(self.valid, dtype=bool)
        for name, arr in (("albedo", albedo), ("depth", depth), ("valid", valid)):
            if arr.shape != self.grid.shape:
                raise DataError(f"{name} shape {arr.shape} does not match grid {self.grid.shape}")
        if np.any(albedo < 0) or not np.all(np.isfinite(albedo)):
            raise DataError("albedo must be finite and nonnegative")
        if not np.all(np.isfinite(depth)) or np.any(depth[valid] < 0):
            raise DataError("depth must be finite and nonnegative on valid pixels")
        for name, arr in (("albedo", albedo), ("depth", depth), ("valid", valid)):
            object.__setattr__(self, name, _frozen(arr))


@dataclass(frozen=True)
class Surfel:
    position: tuple[float, float, float]
    albedo: float = 1.0


@dataclass(frozen=True)
class SceneSurfels:
    """Hidden scene as weighted point scatterers in the half-space z > 0."""

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    albedos: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        alb = np.asarray(self.albedos, dtype=np.float64).reshape(-1)
        if len(pos) != len(alb):
            raise DataError(f"{len(pos)} positions but {len(alb)} albedos")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(alb))):
            raise DataError("surfel positions and albedos must be finite")
        bad = np.flatnonzero(pos[:, 2] <= 0)
        if bad.size:
            raise DataError(f"surfel {bad[0]} has z <= 0; the hidden scene must lie at z > 0")
        bad = np.flatnonzero(alb < 0)
        if bad.size:
            raise DataError(f"surfel {bad[0]} has negative albedo")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "albedos", _frozen(alb))

    @classmethod
    def from_surfels(cls, surfels: Iterable[Surfel | Sequence[float]]) -> "SceneSurfels":
        pos, alb = [], []
        for sf in surfels:
            if isinstance(sf, Surfel):
                pos.append(sf.position)
                alb.append(sf.albedo)
            else:
                x, y, z, a = sf
                pos.append((x, y, z))
                alb.append(a)
        return cls(np.array(pos, dtype=np.float64).reshape(-1, 3), np.array(alb, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.albedos)

    def __iter__(self):
        for p, a in zip(self.positions, self.albedos):
            yield Surfel(tuple(p), float(a))

    def union(self, other: "SceneSurfels") -> "SceneSurfels":
        return SceneSurfels(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.albedos, other.albedos]),
        )

    def scaled(self, alpha: float) -> "SceneSurfels":
        return SceneSurfels(self.positions, self.albedos * alpha)

    def translated(self, offset) -> "SceneSurfels":
        return SceneSurfels(self.positions + np.asarray(offset, dtype=np.float64), self.albedos)


@dataclass(frozen=True)
class PhotonEventList:
    """Detected photons: the pixel each was recorded at and its round-trip path c*T."""

    grid: WallGrid
    falloff_k: int
    pixel_i: np.ndarray
    pixel_j: np.ndarray
    tof_path: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "falloff_k", check_falloff(self.falloff_k))
        pi = np.asarray(self.pixel_i, dtype=np.int64).reshape(-1)
        pj = np.asarray(self.pixel_j, dtype=np.int64).reshape(-1)
        tof = np.asarray(self.tof_path, dtype=np.float64).reshape(-1)
        if not (len(pi) == len(pj) == len(tof)):
            raise DataError("pixel_i, pixel_j and tof_path must have equal length")
        validate_events(self.grid, pi, pj, tof)
        for name, arr in (("pixel_i", pi), ("pixel_j", pj), ("tof_path", tof)):
            object.__setattr__(self, name, _frozen(arr))

    def __len__(self) -> int:
        return len(self.tof_path)

    def chunks(self, size: int = 65536):
        """Yield ``(pixel_i, pixel_j, tof_path)`` slices in event order."""
        for start in range(0, len(self), size):
            stop = start + size
            yield self.pixel_i[start:stop], self.pixel_j[start:stop], self.tof_path[start:stop]


def validate_events(grid: WallGrid, pi, pj, tof, offset: int = 0) -> None:
    """Raise DataError naming the first event (global index) that is out of grid or has tof <= 0."""
    bad = (pi < 0) | (pi >= grid.nx) | (pj < 0) | (pj >= grid.ny)
    if np.any(bad):
        e = int(np.flatnonzero(bad)[0])
        raise DataError(
            f"event {offset + e}: pixel ({int(pi[e])}, {int(pj[e])}) outside grid {grid.shape}"
        )
    bad = ~(np.isfinite(tof) & (tof > 0))
    if np.any(bad):
        e = int(np.flatnonzero(bad)[0])
        raise DataError(f"event {offset + e}: tof_path {tof[e]!r} must be positive and finite")


@dataclass(frozen=True)
class SamplingReport:
    ok: bool
    max_phase_step: float
    u_max: float

    @property
    def aliased(self) -> bool:
        return not self.ok


def check_chirp_sampling(grid: WallGrid, s: float, half_extent=None) -> SamplingReport:
    """Check that the chirp kernel exp(i u^2 / 4 s^2) is sampled without aliasing.

    The phase step between neighbouring kernel taps at offset ``u`` is
    ``u * pitch / (2 s^2)``; the largest offset in the kernel support gives
    the worst case, which must not exceed pi.

    Parameters
    ----------
    grid : WallGrid
    s : float
        Transform parameter in meters.
    half_extent : (int, int), optional
        Kernel half extents in pixels. Defaults to the matched kernel,
        ``(nx - 1, ny - 1)``, i.e. support equal to the field.
    """
    s = check_positive("s", s)
    if half_extent is None:
        half_extent = (grid.nx - 1, grid.ny - 1)
    u_max = max(half_extent) * grid.pitch
    step = u_max * grid.pitch / (2.0 * s * s)
    return SamplingReport(ok=bool(step <= math.pi), max_phase_step=step, u_max=u_max)
