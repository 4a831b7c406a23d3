import math
import warnings

import numpy as np
import pytest

from qfnlos.aggregation import BinSliceStream, aggregate_time_multi
from qfnlos.core import ModulatedAlbedo, ParameterError, SceneSurfels, WallGrid
from qfnlos.deconvolution import deconvolve_fft
from qfnlos.extraction import DepthOptions, RangeWarning, extract_albedo, extract_depth
from qfnlos.forward import render_events, render_histogram, render_phi_analytic
from qfnlos.ledger import MemoryLedger
from qfnlos.pipeline import (
    PipelineOptions,
    extract_inplace,
    max_event_depth,
    reconstruct_events,
    reconstruct_fields,
    reconstruct_histogram,
    reconstruct_stream,
    resolve_ds,
    sharpness,
)


def _scene():
    return SceneSurfels.from_surfels([(0.0, 0.0, 0.5, 1.0), (0.08, -0.06, 0.6, 0.5)])


def _grid(n=32):
    return WallGrid.centered(n, 0.32)


def test_extract_inplace_matches_reference():
    rng = np.random.default_rng(0)
    g = WallGrid(37, 23, 0.01)
    p1 = rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)
    p2 = p1 * np.exp(-1j * rng.uniform(0, 6, g.shape))
    depth, valid = extract_depth(ModulatedAlbedo(g, 0.05, p1), ModulatedAlbedo(g, 0.06, p2),
                                 DepthOptions(albedo_rel_threshold=0.3))
    albedo = np.abs(p1)
    buf = np.stack([p1, p2])
    a, d, v = extract_inplace(buf, 0.05, 0.06, albedo_rel_threshold=0.3)
    np.testing.assert_array_equal(a, albedo)
    np.testing.assert_array_equal(d, depth)
    np.testing.assert_array_equal(v, valid)
    assert np.shares_memory(a, buf) and np.shares_memory(d, buf)


def test_fields_path_matches_stagewise_composition():
    g = _grid()
    s1, s2 = 0.03, 0.0305
    phi1, phi2 = (render_phi_analytic(_scene(), g, s) for s in (s1, s2))
    res = reconstruct_fields(phi1, phi2)
    psi1, psi2 = deconvolve_fft(phi1), deconvolve_fft(phi2)
    depth, valid = extract_depth(psi1, psi2)
    np.testing.assert_allclose(res.reconstruction.albedo, extract_albedo(psi1), rtol=1e-12)
    np.testing.assert_array_equal(res.reconstruction.valid, valid)
    np.testing.assert_allclose(res.reconstruction.depth[valid], depth[valid], rtol=1e-9)


def test_traditional_and_loading_bitwise():
    g = _grid()
    h = render_histogram(_scene(), g, 200, 0.008, 2)
    for dtype in (np.complex64, np.complex128):
        opts = PipelineOptions(dtype=dtype)
        a = reconstruct_histogram(h, 0.03, opts=opts).reconstruction
        b = reconstruct_stream(BinSliceStream.from_histogram(h), 0.03, opts=opts).reconstruction
        for name in ("albedo", "depth", "valid"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_ds_resolution_and_reporting():
    assert resolve_ds(0.05, 0.002, None) == 0.002
    assert resolve_ds(0.05, None, 1.0) == pytest.approx(2 * math.pi * 0.05**3)
    with pytest.raises(ParameterError):
        resolve_ds(0.05, None, None)
    with pytest.raises(ParameterError):
        resolve_ds(0.05, -1e-3, None)
    h = render_histogram(_scene(), _grid(), 200, 0.008, 2)
    res = reconstruct_histogram(h, 0.03)
    # default d_max is half the largest path in the histogram
    assert res.d_max == pytest.approx(0.8)
    assert res.ds == pytest.approx(2 * math.pi * 0.03**3 / 0.64)
    assert res.range_ok
    assert set(res.timings) == {"aggregate", "deconvolve", "extract"}


def test_range_warning_from_pipeline():
    h = render_histogram(_scene(), _grid(), 200, 0.008, 2)
    with pytest.warns(RangeWarning):
        reconstruct_histogram(h, 0.03, ds=0.01, d_max=0.8)


def test_events_pipeline_and_prepass():
    g = _grid(16)
    ev = render_events(_scene(), g, 2, 30.0, rng_seed=2)
    assert max_event_depth(ev) == pytest.approx(0.5 * ev.tof_path.max())
    res = reconstruct_events(ev, 0.03)
    assert res.d_max == pytest.approx(0.5 * ev.tof_path.max())
    empty = render_events(_scene(), g, 2, 0.0)
    with pytest.raises(ParameterError):
        reconstruct_events(empty, 0.03)
    reconstruct_events(empty, 0.03, ds=1e-3)


def test_fdh_ledger_has_no_cube():
    g = _grid(32)
    ev = render_events(_scene(), g, 2, 20.0, rng_seed=2)
    led = MemoryLedger()
    with led.active():
        reconstruct_events(ev, 0.03, ds=1e-3, opts=PipelineOptions(dtype=np.complex64))
    assert led.max_elements() < 32**3
    assert led["field_0"].bytes == 32 * 32 * 8


def test_options_validation():
    with pytest.raises(ParameterError):
        PipelineOptions(dtype=np.float64)
    with pytest.raises(ParameterError):
        PipelineOptions(albedo_rel_threshold=0.0)
    with pytest.raises(ParameterError):
        PipelineOptions(estimator="x")
    with pytest.raises(ParameterError):
        PipelineOptions(chunk_size=0)


def test_sharpness():
    assert sharpness(np.zeros((3, 3))) == 0.0
    img = np.zeros((4, 4))
    img[1, 1] = 2.0
    assert sharpness(img) == pytest.approx(4.0)
    assert sharpness(np.ones((5, 5))) == pytest.approx(1.0)


def test_histogram_pipeline_recovers_point_depth():
    n, pitch, z0 = 64, 0.01, 0.5
    s = math.sqrt(n * pitch * pitch / (2 * math.pi))
    g = WallGrid.centered(n, n * pitch)
    x0, y0 = g.pixel_center(30, 34)
    sc = SceneSurfels.from_surfels([(x0, y0, z0, 1.0)])
    h = render_histogram(sc, g, 400, 0.0025, 2)
    rec = reconstruct_histogram(h, s, d_max=0.6).reconstruction
    peak = np.unravel_index(np.argmax(rec.albedo), rec.albedo.shape)
    assert peak == (30, 34)
    assert abs(rec.depth[peak] - z0) <= max(pitch, 1e-3 * z0)
