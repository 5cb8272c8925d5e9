"""CLI subcommands, file formats, and emitted artifacts."""

import csv
import json

import numpy as np
import pytest

from unifmm.cli import (
    generate_points,
    main,
    read_charges,
    read_points,
    write_charges,
    write_points,
)


def test_generate_zero_points_errors(tmp_path, capsys):
    rc = main(["generate", "--n", "0", "--out", str(tmp_path / "p.bin")])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_generate_sphere_radii_and_roundtrip(tmp_path):
    out = tmp_path / "sphere.bin"
    rc = main(["generate", "--dist", "sphere_surface", "--n", "10000",
               "--seed", "3", "--out", str(out)])
    assert rc == 0
    pts = read_points(str(out))
    radii = np.linalg.norm(pts, axis=1)
    np.testing.assert_allclose(radii, 1.0, atol=1e-12)


def test_generate_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    for out in (a, b):
        rc = main(["generate", "--dist", "uniform_cube", "--n", "10000",
                   "--seed", "11", "--out", str(out), "--charges", str(out) + ".chg"])
        assert rc == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.bin.chg").read_bytes() == (tmp_path / "b.bin.chg").read_bytes()


def test_point_file_magic_and_precision(tmp_path):
    path = tmp_path / "pts.bin"
    pts = generate_points("uniform_cube", 17, 0)
    write_points(str(path), pts, precision="f32")
    raw = path.read_bytes()
    assert raw[:8] == b"FMMPTS1\x00"
    got = read_points(str(path))
    np.testing.assert_allclose(got, pts, atol=1e-6)
    with pytest.raises(ValueError, match="magic"):
        read_charges(str(path))


def test_charges_file_roundtrip(tmp_path):
    path = tmp_path / "q.bin"
    q = np.linspace(0, 1, 9)
    write_charges(str(path), q)
    np.testing.assert_allclose(read_charges(str(path)), q)


def test_verify_small_instance_passes(tmp_path, capsys):
    manifest = tmp_path / "m.json"
    rc = main(["verify", "--n", "800", "--p", "8", "--order", "4",
               "--local-depth", "2", "--seed", "5", "--out", str(manifest)])
    out = capsys.readouterr().out
    assert rc == 0, out
    assert "PASS" in out
    data = json.loads(manifest.read_text())
    assert data["verify"]["distributed_vs_reference"] <= 1e-10
    assert len(data["verify"]["rank_point_counts"]) == 8


def test_verify_p1_reference_identity(capsys):
    rc = main(["verify", "--n", "400", "--p", "1", "--order", "3",
               "--local-depth", "1", "--seed", "6"])
    out = capsys.readouterr().out
    assert rc == 0
    # Same code path on one rank: the distributed-vs-reference error is 0.
    line = [l for l in out.splitlines() if "distributed-vs-reference" in l][0]
    assert float(line.split(":")[1].split("(")[0]) == 0.0


def test_verify_corrupted_ghost_fails(capsys):
    rc = main(["verify", "--n", "800", "--p", "8", "--order", "3",
               "--local-depth", "2", "--seed", "7", "--test-drop-ghost", "2"])
    captured = capsys.readouterr()
    assert rc == 1
    assert "unresolved dependency" in captured.err


def test_sweep_rejects_non_power_of_8(tmp_path, capsys):
    rc = main(["sweep", "--p", "8,12", "--n", "64", "--out", str(tmp_path / "s")])
    assert rc == 1
    assert "infeasible" in capsys.readouterr().err


def test_sweep_weak_emits_stats_timings_manifest(tmp_path):
    out = tmp_path / "weak"
    rc = main(["sweep", "--p", "8,64", "--mode", "weak", "--n", "64",
               "--local-depth", "1", "--order", "2", "--repeats", "2",
               "--seed", "9", "--out", str(out)])
    assert rc == 0
    with open(str(out) + ".stats.csv") as f:
        rows = list(csv.DictReader(f))
    # One row per (P, repeat, rank, collective).
    assert len(rows) == (8 + 64) * 2 * 5
    for row in rows:
        assert int(row["v_degree"]) <= 26
        if row["collective"] == "gatherv":
            assert int(row["calls"]) == 1
    with open(str(out) + ".timings.csv") as f:
        trows = list(csv.DictReader(f))
    phases = {r["phase"] for r in trows}
    assert {"sort_tree", "computation", "gatherv", "scatterv",
            "neighbor_alltoallv"} <= phases
    stds = [r for r in trows if r["repeat"] == "std"]
    assert stds and all(float(r["seconds"]) >= 0 for r in stds)
    manifest = json.loads((tmp_path / "weak.manifest.json").read_text())
    assert manifest["sweep"]["mode"] == "weak"
    assert manifest["transport_backend"] == "sim"


def test_sweep_strong_mode_runs(tmp_path):
    out = tmp_path / "strong"
    rc = main(["sweep", "--p", "8,64", "--mode", "strong", "--n", "512",
               "--local-depth", "1", "--order", "2", "--seed", "4",
               "--out", str(out)])
    assert rc == 0
    with open(str(out) + ".stats.csv") as f:
        rows = list(csv.DictReader(f))
    n_by_p = {}
    for row in rows:
        n_by_p.setdefault(row["p"], 0)
        if row["collective"] == "gatherv":
            n_by_p[row["p"]] += int(row["n_points"])
    # Strong scaling holds total N fixed.
    assert n_by_p["8"] == n_by_p["64"] == 512


def test_unknown_backend_rejected(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FMM_BACKEND", "mpi")
    rc = main(["generate", "--n", "4", "--out", str(tmp_path / "x.bin")])
    assert rc == 1
    assert "unknown transport backend" in capsys.readouterr().err
