import csv
import io
import math

import numpy as np
import pytest

from qfnlos import io_formats as iof
from qfnlos.aggregation import aggregate_time
from qfnlos.cli import UsageError, main, parse_config_text

N, PITCH, Z0 = 32, 0.01, 0.3
S_GOOD = math.sqrt(N * PITCH * PITCH / (2 * math.pi))


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


@pytest.fixture
def scene(tmp_path):
    # surfel on the center of pixel (16, 16) of a centered 32 x 32 grid
    x = 0.5 * PITCH
    p = tmp_path / "scene.txt"
    p.write_text(f"# one surfel\n{x} {x} {Z0} 1.0\n")
    return p


@pytest.fixture
def hist_file(tmp_path, scene):
    out = tmp_path / "h.qfh"
    code, _ = run("render", "--scene", scene, "--grid", N, N, PITCH, "--nt", 256,
                  "--bin-length", 0.004, "--layout", 1, "-o", out,
                  "--events-output", tmp_path / "e.qfe", "--photons", 200)
    assert code == 0
    return out


def test_render_single_hot_bin(tmp_path):
    scene = tmp_path / "s.txt"
    scene.write_text("0 0 1 1\n")
    out = tmp_path / "h.qfh"
    code, text = run("render", "--scene", scene, "--grid", 1, 1, 0.01, 0, 0, "--nt", 400,
                     "--bin-length", 0.01, "--deposit", "nearest-bin", "-o", out)
    assert code == 0
    assert "no events clipped" in text
    h = iof.read_histogram(out)
    assert np.flatnonzero(h.data).tolist() == [200]
    assert h.data[0, 0, 200] == 200.0


def test_render_empty_scene(tmp_path):
    scene = tmp_path / "s.txt"
    scene.write_text("")
    out = tmp_path / "h.qfh"
    code, _ = run("render", "--scene", scene, "--grid", 3, 3, 0.1, "--nt", 5, "--bin-length", 0.1, "-o", out)
    assert code == 0
    assert not iof.read_histogram(out).data.any()


def test_render_malformed_scene(tmp_path, capsys):
    scene = tmp_path / "s.txt"
    scene.write_text("0 0 1 1\n1 2 three 4\n")
    code, _ = run("render", "--scene", scene, "--grid", 3, 3, 0.1, "--nt", 5, "--bin-length", 0.1,
                  "-o", tmp_path / "h.qfh")
    assert code == 2
    assert "line 2" in capsys.readouterr().err


def test_reconstruct_point_scatterer(tmp_path, hist_file):
    prefix = str(tmp_path / "r")
    code, text = run("reconstruct", "-i", hist_file, "--s", S_GOOD, "-o", prefix, "--d-max", 0.5)
    assert code == 0
    assert "ds = " in text and "total" in text
    rec = iof.read_reconstruction(prefix + ".qfr")
    peak = np.unravel_index(np.argmax(rec.albedo), rec.albedo.shape)
    assert peak == (16, 16)
    assert abs(rec.depth[peak] - Z0) <= max(PITCH, 1e-3 * Z0)
    for suffix in ("_albedo.pgm", "_depth.pgm", "_mask.pgm"):
        assert iof.read_image_pgm(prefix + suffix).shape == (N, N)


def test_loading_matches_traditional_bitwise(tmp_path, hist_file):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run("reconstruct", "-i", hist_file, "--s", S_GOOD, "--mode", "traditional", "-o", a)[0] == 0
    assert run("reconstruct", "-i", hist_file, "--s", S_GOOD, "--mode", "loading", "-o", b)[0] == 0
    for suffix in (".qfr", "_albedo.pgm", "_depth.pgm", "_mask.pgm"):
        assert open(a + suffix, "rb").read() == open(b + suffix, "rb").read()


def _ledger_rows(text):
    rows = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 3 and parts[1].isdigit() and parts[2].isdigit():
            rows[parts[0]] = int(parts[1])
    return rows


def test_fdh_reconstruct_has_no_cube(tmp_path, hist_file):
    code, text = run("reconstruct", "-i", tmp_path / "e.qfe", "--s", S_GOOD, "-o", tmp_path / "f")
    assert code == 0
    assert "mode fdh" in text
    rows = _ledger_rows(text)
    assert "field_0" in rows and "histogram" not in rows and "slice" not in rows
    assert max(rows.values()) < N * N * 256
    rec = iof.read_reconstruction(str(tmp_path / "f") + ".qfr")
    assert np.unravel_index(np.argmax(rec.albedo), rec.albedo.shape) == (16, 16)


def test_runs_are_deterministic(tmp_path, hist_file):
    for mode_input in (hist_file, tmp_path / "e.qfe"):
        a, b = str(tmp_path / "x"), str(tmp_path / "y")
        run("reconstruct", "-i", mode_input, "--s", S_GOOD, "-o", a)
        run("reconstruct", "-i", mode_input, "--s", S_GOOD, "-o", b)
        assert open(a + ".qfr", "rb").read() == open(b + ".qfr", "rb").read()


def test_sweep_single_s_matches_reconstruct(tmp_path, hist_file):
    r, sw = str(tmp_path / "r"), str(tmp_path / "sw")
    run("reconstruct", "-i", hist_file, "--s", S_GOOD, "-o", r)
    code, _ = run("sweep", "-i", hist_file, "--s-list", S_GOOD, "-o", sw)
    assert code == 0
    assert open(r + ".qfr", "rb").read() == open(sw + "_s0.qfr", "rb").read()


def test_sweep_flags_aliased_s_and_records_failures(tmp_path, hist_file):
    sw = str(tmp_path / "sw")
    code, _ = run("sweep", "-i", hist_file, "--s-list", S_GOOD, 0.002, 2 * S_GOOD, "--ds", 1e-4, "-o", sw)
    assert code == 0
    with open(sw + "_sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["status"] for r in rows] == ["ok", "ok", "ok"]
    assert [r["aliased"] for r in rows] == ["0", "1", "0"]
    assert float(rows[0]["peak_sharpness"]) > 1.0
    code, _ = run("sweep", "-i", hist_file, "--s-list", S_GOOD, "--ds", -1.0, "-o", sw)
    assert code == 0
    with open(sw + "_sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["status"].startswith("error:")


def test_exit_codes(tmp_path, hist_file, capsys):
    assert run("reconstruct", "--no-such-flag")[0] == 1
    assert run("reconstruct", "-i", hist_file, "-o", tmp_path / "x")[0] == 1
    assert run("reconstruct", "-i", tmp_path / "missing.qfh", "--s", 0.1, "-o", tmp_path / "x")[0] == 2
    code, _ = run("reconstruct", "-i", hist_file, "--s", 0.05, "--ds", 0.0, "-o", tmp_path / "x")
    assert code == 3
    assert "reconstruct:" in capsys.readouterr().err
    layout0 = tmp_path / "l0.qfh"
    iof.write_histogram(layout0, iof.read_histogram(hist_file))
    assert run("reconstruct", "-i", layout0, "--s", 0.05, "--mode", "loading", "-o", tmp_path / "x")[0] == 2
    assert run("reconstruct", "-i", tmp_path / "e.qfe", "--s", 0.05, "--mode", "loading", "-o", tmp_path / "x")[0] == 1


def test_config_file_and_flag_override(tmp_path, hist_file):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"input = {hist_file}\ns = 0.5\noutput = {tmp_path / 'c'}\nalbedo_threshold = 0.2\n")
    code, text = run("reconstruct", "--config", cfg, "--s", S_GOOD)
    assert code == 0
    assert f"s1 = {S_GOOD:.8g}" in text
    cfg.write_text("frobnicate = 3\n")
    assert run("reconstruct", "--config", cfg)[0] == 1
    cfg.write_text("nt = -4\n")
    assert run("reconstruct", "--config", cfg)[0] == 1


def test_config_parser():
    cfg = parse_config_text("grid = 4 4 0.1\ns_list = 0.1, 0.2\nmode = fdh # comment\n")
    assert cfg == {"grid": ("4", "4", "0.1"), "s_list": [0.1, 0.2], "mode": "fdh"}
    with pytest.raises(UsageError, match="line 1"):
        parse_config_text("mode = quantum\n")
    with pytest.raises(UsageError, match="line 2"):
        parse_config_text("s = 1\njust words\n")


def test_timing_csv_block(tmp_path, hist_file):
    code, text = run("reconstruct", "-i", hist_file, "--s", S_GOOD, "-o", tmp_path / "t",
                     "--timing-csv", "--threads", 1)
    assert code == 0
    block = text[text.index("stage,name,seconds"):]
    rows = list(csv.reader(io.StringIO(block)))
    names = [r[1] for r in rows[1:]]
    assert {"aggregate", "deconvolve", "extract", "write"} <= set(names)
    assert all(r[0] == "reconstruct" and float(r[2]) >= 0 for r in rows[1:])


def test_aggregate_and_transpose_commands(tmp_path, hist_file):
    layout0 = tmp_path / "l0.qfh"
    iof.write_histogram(layout0, iof.read_histogram(hist_file))
    back = tmp_path / "l1.qfh"
    assert run("transpose", layout0, back)[0] == 0
    assert iof.read_histogram_header(back).layout == 1
    out = tmp_path / "phi.qff"
    assert run("aggregate", "-i", back, "--s", 0.05, "--mode", "loading", "-o", out)[0] == 0
    expected = aggregate_time(iof.read_histogram(hist_file), 0.05).data
    np.testing.assert_array_equal(iof.read_field(out).data, expected)
    assert run("aggregate", "-i", back, "--s-list", 0.05, 0.06, "-o", tmp_path / "multi")[0] == 0
    np.testing.assert_array_equal(iof.read_field(str(tmp_path / "multi") + "_0.qff").data, expected)


def test_pipeline_command_all_modes(tmp_path, scene):
    for mode in ("traditional", "loading", "fdh"):
        prefix = str(tmp_path / mode)
        code, text = run("pipeline", "--scene", scene, "--grid", N, N, PITCH, "--nt", 256,
                         "--bin-length", 0.004, "--s", S_GOOD, "--mode", mode, "--photons", 100,
                         "-o", prefix)
        assert code == 0, text
        rec = iof.read_reconstruction(prefix + ".qfr")
        assert np.unravel_index(np.argmax(rec.albedo), rec.albedo.shape) == (16, 16)


def test_bench_command(tmp_path):
    out = tmp_path / "bench.csv"
    code, _ = run("bench", "--modes", "fdh", "loading", "--sizes", 8, 16, "--repeats", 5, "-o", out)
    assert code == 0
    text = out.read_text()
    assert text.startswith("N,mode,stage,median_seconds")
    assert "fdh,ledger_bytes" in text
