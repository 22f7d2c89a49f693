import json

import numpy as np
import pytest

from hsnct.cli import main
from hsnct.containers import (
    ScanGeometry,
    SpectralAxis,
    ToFConverter,
    VolumeStack,
    geometry_header,
    load_basis,
    load_sinogram,
    load_subspace_sinogram,
    load_volume,
    spectral_header,
    write_container,
)
from hsnct.phantom import (
    EdgeFeature,
    MaterialSpectrum,
    PhantomSpec,
    ShapeSpec,
    spec_to_dict,
)

ANG = 1e-10
REPORT_KEYS = {"algorithm", "engine", "n_k", "n_s", "extract_s", "recon_s",
               "expand_s", "total_s", "epsilon_frac", "snr_db"}
TIMING_KEYS = {"extract_s", "recon_s", "expand_s", "total_s"}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Small end-to-end workspace: spec/geom JSON plus the stage outputs up
    to normalized projections."""
    d = tmp_path_factory.mktemp("cli")
    mats = (
        MaterialSpectrum("m0", 0.01, (EdgeFeature(2.0 * ANG, 0.002, 0.01, 0.08 * ANG),)),
        MaterialSpectrum("m1", 0.008, (EdgeFeature(3.0 * ANG, 0.012, 0.004, 0.05 * ANG),)),
        MaterialSpectrum("m2", 0.006, (EdgeFeature(4.2 * ANG, 0.004, 0.02, 0.1 * ANG),)),
    )
    shapes = (
        ShapeSpec("ellipse", (0.5, 0.5), (0.35, 0.35), 0),
        ShapeSpec("rectangle", (0.45, 0.4), (0.12, 0.1), 1),
        ShapeSpec("ellipse", (0.6, 0.6), (0.1, 0.12), 2),
    )
    spec = PhantomSpec(32, 2, shapes, mats, 200.0, 7)
    axis = SpectralAxis(np.linspace(2.5e-3, 1.31e-2, 17), ToFConverter(flight_path=10.0))
    geom = ScanGeometry(16, 2, 32, np.linspace(0, np.pi, 16, endpoint=False),
                        flight_path=10.0)
    (d / "spec.json").write_text(json.dumps(
        {"phantom": spec_to_dict(spec), "spectral": spectral_header(axis)}))
    (d / "geom.json").write_text(json.dumps(geometry_header(geom)))
    assert main(["phantom", "--spec", str(d / "spec.json"),
                 "--out-truth", str(d / "t.hsnct")]) == 0
    assert main(["simulate", "--truth", str(d / "t.hsnct"),
                 "--geom", str(d / "geom.json"), "--flux", "200",
                 "--out", str(d / "scan.hsnct"), "--seed", "7"]) == 0
    assert main(["normalize", "--scan", str(d / "scan.hsnct"),
                 "--out", str(d / "p.hsnct")]) == 0
    return d


class TestStageCommands:
    def test_phantom_truth_container(self, workdir):
        vol, header = load_volume(workdir / "t.hsnct")
        assert vol.num_channels == 16 and vol.num_rows == 2
        assert "spectral" in header
        nonzero = vol.voxels[np.any(vol.voxels > 0, axis=1)]
        assert np.unique(nonzero, axis=0).shape[0] == 3

    def test_simulate_seed_determinism(self, workdir):
        a, b, c = (str(workdir / f"scan_{k}.hsnct") for k in "abc")
        base = ["simulate", "--truth", str(workdir / "t.hsnct"),
                "--geom", str(workdir / "geom.json"), "--flux", "200"]
        assert main(base + ["--out", a, "--seed", "9"]) == 0
        assert main(base + ["--out", b, "--seed", "9"]) == 0
        assert main(base + ["--out", c, "--seed", "10"]) == 0
        ba, bb, bc = (open(p, "rb").read() for p in (a, b, c))
        assert ba == bb
        assert ba != bc

    def test_normalize_clamp_flags(self, workdir):
        clamped = load_sinogram(workdir / "p.hsnct")
        assert float(clamped.values.min()) >= 0.0
        out = str(workdir / "p_raw.hsnct")
        assert main(["normalize", "--scan", str(workdir / "scan.hsnct"),
                     "--out", out, "--no-clamp"]) == 0
        raw = load_sinogram(out)
        assert float(raw.values.min()) < 0.0

    def test_extract_reconstruct_expand(self, workdir):
        d = workdir
        assert main(["extract", "--in", str(d / "p.hsnct"), "--rank", "3",
                     "--out-v", str(d / "v.hsnct"), "--out-d", str(d / "d.hsnct"),
                     "--max-iters", "300", "--tol", "1e-6"]) == 0
        coeffs = load_subspace_sinogram(d / "v.hsnct")
        basis = load_basis(d / "d.hsnct")
        assert coeffs.rank == 3 and basis.rank == 3
        assert basis.basis.shape == (16, 3)

        assert main(["reconstruct", "--in", str(d / "v.hsnct"), "--engine", "fbp",
                     "--out", str(d / "xs.hsnct")]) == 0
        xs, _ = load_volume(d / "xs.hsnct")
        assert xs.num_channels == 3
        assert xs.voxels.shape == (2 * 32 * 32, 3)

        assert main(["expand", "--in", str(d / "xs.hsnct"),
                     "--basis", str(d / "d.hsnct"),
                     "--out", str(d / "xh.hsnct")]) == 0
        xh, header = load_volume(d / "xh.hsnct")
        assert xh.num_channels == 16
        assert "spectral" in header

    def test_reconstruct_mbir_flags(self, workdir):
        d = workdir
        assert main(["reconstruct", "--in", str(d / "v.hsnct"), "--engine", "mbir",
                     "--beta", "2.0", "--prior", "huber",
                     "--out", str(d / "xs_mbir.hsnct")]) == 0
        vol, _ = load_volume(d / "xs_mbir.hsnct")
        assert float(vol.voxels.min()) >= 0.0

    def test_reconstruct_fbp_rejects_mbir_flags(self, workdir, capsys):
        rc = main(["reconstruct", "--in", str(workdir / "v.hsnct"),
                   "--engine", "fbp", "--beta", "1.0",
                   "--out", str(workdir / "nope.hsnct")])
        assert rc == 1
        assert "mbir" in capsys.readouterr().err

    def test_expand_rank_mismatch_names_both_counts(self, workdir, capsys):
        d = workdir
        assert main(["extract", "--in", str(d / "p.hsnct"), "--rank", "2",
                     "--out-v", str(d / "v2.hsnct"),
                     "--out-d", str(d / "d2.hsnct")]) == 0
        rc = main(["expand", "--in", str(d / "xs.hsnct"),
                   "--basis", str(d / "d2.hsnct"), "--out", str(d / "bad.hsnct")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "3" in err and "2" in err


class TestPipelineCommands:
    def test_fhr_report_schema_and_determinism(self, workdir):
        d = workdir
        base = ["fhr", "--in", str(d / "p.hsnct"), "--rank", "3",
                "--engine", "fbp", "--seed", "3", "--threads", "1"]
        assert main(base + ["--out", str(d / "f1.hsnct"),
                            "--report", str(d / "r1.json")]) == 0
        assert main(base + ["--out", str(d / "f2.hsnct"),
                            "--report", str(d / "r2.json")]) == 0
        assert (d / "f1.hsnct").read_bytes() == (d / "f2.hsnct").read_bytes()
        r1 = json.loads((d / "r1.json").read_text())
        r2 = json.loads((d / "r2.json").read_text())
        assert set(r1) == REPORT_KEYS
        for k in REPORT_KEYS - TIMING_KEYS:
            assert r1[k] == r2[k]
        assert r1["algorithm"] == "fhr" and r1["n_s"] == 3 and r1["n_k"] == 16
        assert r1["snr_db"] is None and r1["epsilon_frac"] > 0
        vol, header = load_volume(d / "f1.hsnct")
        assert vol.num_channels == 16 and "spectral" in header

    def test_dhr_report(self, workdir):
        d = workdir
        assert main(["dhr", "--in", str(d / "p.hsnct"), "--engine", "fbp",
                     "--out", str(d / "dh.hsnct"),
                     "--report", str(d / "rd.json")]) == 0
        r = json.loads((d / "rd.json").read_text())
        assert set(r) == REPORT_KEYS
        assert r["algorithm"] == "dhr" and r["n_s"] == 16 and r["n_k"] == 16
        assert r["epsilon_frac"] is None
        vol, _ = load_volume(d / "dh.hsnct")
        assert vol.num_channels == 16

    def test_bench_rejects_unknown_preset(self, workdir, capsys):
        rc = main(["bench", "--out", str(workdir / "r.csv"), "--preset", "pocket"])
        assert rc == 1
        assert "usage" in capsys.readouterr().err


class TestSliceCommand:
    def test_pgm_output(self, workdir):
        out = workdir / "img.pgm"
        assert main(["slice", "--in", str(workdir / "f1.hsnct"), "--z", "1",
                     "--bin", "8", "--out", str(out)]) == 0
        blob = out.read_bytes()
        assert blob.startswith(b"P5\n32 32\n255\n")
        assert len(blob) == len(b"P5\n32 32\n255\n") + 32 * 32

    def test_all_zero_volume_is_all_black(self, workdir):
        zpath = workdir / "zero.hsnct"
        write_container(zpath, VolumeStack(np.zeros((16, 2), dtype=np.float32), 1, 4))
        out = workdir / "black.pgm"
        assert main(["slice", "--in", str(zpath), "--z", "0", "--bin", "0",
                     "--out", str(out)]) == 0
        blob = out.read_bytes()
        assert blob == b"P5\n4 4\n255\n" + bytes(16)

    def test_out_of_range_indices(self, workdir):
        args = ["slice", "--in", str(workdir / "f1.hsnct"),
                "--out", str(workdir / "x.pgm")]
        assert main(args + ["--z", "5", "--bin", "0"]) == 1
        assert main(args + ["--z", "0", "--bin", "99"]) == 1


class TestExitCodes:
    def test_missing_file_is_io_error(self, workdir):
        assert main(["normalize", "--scan", str(workdir / "ghost.hsnct"),
                     "--out", str(workdir / "o.hsnct")]) == 2

    def test_corrupt_container_is_io_error(self, workdir):
        bad = workdir / "corrupt.hsnct"
        bad.write_bytes((workdir / "p.hsnct").read_bytes()[:40])
        assert main(["normalize", "--scan", str(bad),
                     "--out", str(workdir / "o.hsnct")]) == 2

    def test_wrong_role_is_validation_error(self, workdir):
        # the file is well formed, it is just not a raw scan
        assert main(["normalize", "--scan", str(workdir / "p.hsnct"),
                     "--out", str(workdir / "o.hsnct")]) == 1

    def test_unknown_flag_usage_on_stderr(self, capsys):
        assert main(["fhr", "--bogus"]) == 1
        captured = capsys.readouterr()
        assert "usage" in captured.err
        assert captured.out == ""

    def test_unknown_subcommand(self, capsys):
        assert main(["transmogrify"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "command" in capsys.readouterr().out

    def test_malformed_spec_json_is_validation_error(self, workdir):
        bad = workdir / "bad_spec.json"
        bad.write_text("{\"phantom\": {}}")
        assert main(["phantom", "--spec", str(bad),
                     "--out-truth", str(workdir / "t2.hsnct")]) == 1

    def test_negative_rank_rejected(self, workdir):
        assert main(["extract", "--in", str(workdir / "p.hsnct"), "--rank", "-2",
                     "--out-v", str(workdir / "nv.hsnct"),
                     "--out-d", str(workdir / "nd.hsnct")]) == 1
