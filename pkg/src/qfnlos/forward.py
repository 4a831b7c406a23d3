"""Confocal transient forward model and closed-form oracles for surfel scenes.

A surfel with albedo ``a`` at distance ``r`` from a wall pixel returns light
after a round-trip path ``2 r``. :func:`render_histogram` deposits the mass::

    M = a * (2 / bin_length) * r^(-k)

at that path. The ``2 / bin_length`` factor is the time-density
normalization that makes the midpoint aggregation of the histogram
reproduce :func:`render_phi_analytic` up to bin quantization.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import (
    AggregatedField,
    DataError,
    ParameterError,
    PhotonEventList,
    SceneSurfels,
    TransientHistogram,
    WallGrid,
    check_falloff,
    check_positive,
)

DEPOSIT_MODES = ("linear-split", "nearest-bin")


@dataclass(frozen=True)
class RenderOptions:
    deposit: str = "linear-split"
    # None disables noise; otherwise Poisson noise at this exposure scale
    exposure_scale: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.deposit not in DEPOSIT_MODES:
            raise ParameterError(f"deposit must be one of {DEPOSIT_MODES}, got {self.deposit!r}")
        if self.exposure_scale is not None and not self.exposure_scale >= 0:
            raise ParameterError(f"exposure_scale must be >= 0, got {self.exposure_scale}")


@dataclass
class ClipReport:
    """Surfel/pixel pairs whose return path fell (partly) outside the time window."""

    clipped_pairs: int = 0
    clipped_mass: float = 0.0
    total_mass: float = 0.0

    @property
    def clean(self) -> bool:
        return self.clipped_pairs == 0

    def __str__(self) -> str:
        if self.clean:
            return "clip report: no events clipped"
        return (f"clip report: {self.clipped_pairs} surfel/pixel pairs clipped, "
                f"{self.clipped_mass:.6g} of {self.total_mass:.6g} mass lost")


def _wall_mesh(grid: WallGrid):
    x, y = grid.coordinates()
    return np.meshgrid(x, y, indexing="ij")


def _squared_distance(X, Y, p) -> np.ndarray:
    return (X - p[0]) ** 2 + (Y - p[1]) ** 2 + p[2] * p[2]


def render_histogram(scene: SceneSurfels, grid: WallGrid, nt: int, bin_length: float, k: int,
                     opts: RenderOptions | None = None, *, return_report: bool = False):
    """Render the confocal transient histogram of a surfel scene.

    No occlusion, no interreflection, no foreshortening.

    Parameters
    ----------
    scene : SceneSurfels
    grid : WallGrid
    nt : int
        Number of time bins.
    bin_length : float
        Round-trip path covered by one bin (m).
    k : int
        Radiometric falloff exponent, 2 or 4.
    opts : RenderOptions, optional
    return_report : bool
        Also return the :class:`ClipReport`.

    Returns
    -------
    TransientHistogram, or ``(TransientHistogram, ClipReport)``
    """
    opts = opts or RenderOptions()
    bin_length = check_positive("bin_length", bin_length)
    k = check_falloff(k)
    if int(nt) < 1:
        raise ParameterError(f"nt must be >= 1, got {nt}")
    nt = int(nt)

    data = np.zeros((grid.nx, grid.ny, nt))
    report = ClipReport()
    X, Y = _wall_mesh(grid)
    I, J = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny), indexing="ij")
    for p, a in zip(scene.positions, scene.albedos):
        r = np.sqrt(_squared_distance(X, Y, p))
        mass = a * (2.0 / bin_length) * r ** (-k)
        report.total_mass += float(mass.sum())
        if opts.deposit == "nearest-bin":
            n = np.floor(2.0 * r / bin_length).astype(np.int64)
            parts = [(n, mass)]
        else:
            u = 2.0 * r / bin_length - 0.5
            n0 = np.floor(u)
            frac = u - n0
            n0 = n0.astype(np.int64)
            parts = [(n0, (1.0 - frac) * mass), (n0 + 1, frac * mass)]
        clipped = np.zeros(grid.shape, dtype=bool)
        for n, m in parts:
            inside = (n >= 0) & (n < nt)
            out = ~inside & (m != 0)
            if np.any(out):
                clipped |= out
                report.clipped_mass += float(m[out].sum())
            data[I[inside], J[inside], n[inside]] += m[inside]
        report.clipped_pairs += int(clipped.sum())

    if opts.exposure_scale is not None:
        data = _poisson(data, opts.exposure_scale, opts.rng_seed)
    hist = TransientHistogram(grid, bin_length, k, data)
    return (hist, report) if return_report else hist


def _poisson(data: np.ndarray, exposure: float, seed: int) -> np.ndarray:
    if exposure == 0:
        return np.zeros_like(data)
    # one child stream per wall row: independent of how rows are scheduled
    children = np.random.SeedSequence(seed).spawn(data.shape[0])
    noisy = np.empty_like(data)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        noisy[i] = rng.poisson(exposure * data[i]) / exposure
    return noisy


def render_phi_analytic(scene: SceneSurfels, grid: WallGrid, s: float, k: int = 2) -> AggregatedField:
    """Closed-form aggregated field: sum_p a_p exp(-i |(x, 0) - p|^2 / (4 s^2)).

    ``k`` only tags the result; the continuous aggregation cancels the falloff exactly.
    """
    s = check_positive("s", s)
    X, Y = _wall_mesh(grid)
    phi = np.zeros(grid.shape, dtype=np.complex128)
    c = 1.0 / (4.0 * s * s)
    for p, a in zip(scene.positions, scene.albedos):
        phi += a * np.exp(-1j * (c * _squared_distance(X, Y, p)))
    return AggregatedField(grid, s, phi, falloff_k=k)


def render_psi_analytic(scene: SceneSurfels, grid: WallGrid, s: float) -> np.ndarray:
    """Ideal modulated albedo of a surfel scene, each surfel snapped to its nearest pixel."""
    s = check_positive("s", s)
    psi = np.zeros(grid.shape, dtype=np.complex128)
    for p, a in zip(scene.positions, scene.albedos):
        i, j = grid.pixel_index(p[0], p[1])
        if grid.contains(i, j):
            psi[i, j] += a * np.exp(-1j * p[2] ** 2 / (4.0 * s * s))
    return psi


class SyntheticEventSource:
    """Poisson photon events for a surfel scene, generated lazily wall row by wall row.

    For every (surfel, pixel) pair the photon count is Poisson with mean
    ``mean * a_p * r^(-k) / normalizer`` where ``normalizer`` is the largest
    ``a_p * r^(-k)`` over all pairs. Every photon of a pair has
    ``tof_path = 2 r``. Row ``i`` draws from its own child of
    ``SeedSequence(rng_seed)``, so output does not depend on chunking.
    """

    def __init__(self, scene: SceneSurfels, grid: WallGrid, k: int, mean: float, rng_seed: int = 0):
        if not mean >= 0:
            raise ParameterError(f"mean photon count must be >= 0, got {mean}")
        self.scene = scene
        self.grid = grid
        self.falloff_k = check_falloff(k)
        self.mean = float(mean)
        self.rng_seed = rng_seed
        self._norm = self._normalizer()

    def _normalizer(self) -> float:
        X, Y = _wall_mesh(self.grid)
        best = 0.0
        for p, a in zip(self.scene.positions, self.scene.albedos):
            r2 = _squared_distance(X, Y, p)
            best = max(best, float(a * r2.min() ** (-self.falloff_k / 2)))
        return best

    def rows(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        grid, scene = self.grid, self.scene
        children = np.random.SeedSequence(self.rng_seed).spawn(grid.nx)
        x, y = grid.coordinates()
        jj = np.arange(grid.ny)
        for i, child in enumerate(children):
            if self.mean == 0 or self._norm == 0 or len(scene) == 0:
                continue
            rng = np.random.default_rng(child)
            r = np.sqrt((x[i] - scene.positions[:, 0]) ** 2
                        + (y[:, None] - scene.positions[:, 1]) ** 2
                        + scene.positions[:, 2] ** 2)  # (ny, P)
            lam = self.mean * scene.albedos * r ** (-self.falloff_k) / self._norm
            counts = rng.poisson(lam).ravel()
            if not counts.any():
                continue
            tof = np.repeat((2.0 * r).ravel(), counts)
            pj = np.repeat(np.repeat(jj, len(scene)), counts)
            yield np.full(len(tof), i, dtype=np.int64), pj, tof

    def chunks(self, size: int = 65536):
        for pi, pj, tof in self.rows():
            for start in range(0, len(tof), size):
                sl = slice(start, start + size)
                yield pi[sl], pj[sl], tof[sl]


def render_events(scene: SceneSurfels, grid: WallGrid, k: int,
                  mean_photons_per_surfel_pixel: float, rng_seed: int = 0) -> PhotonEventList:
    """Materialize :class:`SyntheticEventSource` into a :class:`PhotonEventList`."""
    src = SyntheticEventSource(scene, grid, k, mean_photons_per_surfel_pixel, rng_seed)
    parts = list(src.rows())
    if not parts:
        empty = np.zeros(0, dtype=np.int64)
        return PhotonEventList(grid, k, empty, empty, np.zeros(0))
    pi, pj, tof = (np.concatenate(c) for c in zip(*parts))
    return PhotonEventList(grid, k, pi, pj, tof)


def parse_scene_text(text: str) -> SceneSurfels:
    """Parse a surfel list: one ``x y z albedo`` per line; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise DataError(f"scene line {lineno}: expected 4 values 'x y z albedo', got {len(fields)}")
        try:
            x, y, z, a = (float(f) for f in fields)
        except ValueError:
            raise DataError(f"scene line {lineno}: cannot parse {line!r} as numbers") from None
        if z <= 0:
            raise DataError(f"scene line {lineno}: z must be > 0, got {z}")
        if a < 0:
            raise DataError(f"scene line {lineno}: albedo must be >= 0, got {a}")
        rows.append((x, y, z, a))
    return SceneSurfels.from_surfels(rows)


def load_scene(path) -> SceneSurfels:
    with open(path) as fh:
        return parse_scene_text(fh.read())
