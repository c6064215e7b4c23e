from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from conftest import run_config_text
from hypothesis import given
from hypothesis import strategies as st

from auglidar.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, run
from auglidar.cloud import SemanticPointCloud
from auglidar.config import ConfigError
from auglidar.io import read_point_cloud, write_point_cloud
from auglidar.pipeline import (
    RunConfig,
    ValidationError,
    cmd_build_map,
    cmd_calibrate,
    cmd_clean_background,
    cmd_simulate,
    cmd_stats,
    frame_seed,
)
from auglidar.placement import ProbabilityMap
from auglidar.sensor import BeamTable

FIXTURE_W = np.array([[0, 0, 0, 0, 0],
                      [0, 0.25, 0.5, 0.25, 0],
                      [0, 0.5, 1.0, 0.5, 0],
                      [0, 0.25, 0.5, 0.25, 0],
                      [0, 0, 0, 0, 0]])


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def write_config(path: Path, root: Path, **kw) -> Path:
    kw.setdefault("resolution", 256)
    path.write_text(run_config_text(root, **kw))
    return path


@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2 ** 32 - 1),
       st.integers(0, 2 ** 32 - 1), st.integers(0, 2 ** 32 - 1))
def test_frame_seed_injective(m1, i1, m2, i2):
    if (m1, i1) != (m2, i2):
        assert frame_seed(m1, i1) != frame_seed(m2, i2)


def test_config_requires_version():
    with pytest.raises(ConfigError, match="version"):
        RunConfig.from_text("background = a\nlibrary = b\nmaps = c\noutput = d\n")
    with pytest.raises(ConfigError, match="version"):
        RunConfig.from_text("version = 2\nbackground = a\nlibrary = b\nmaps = c\noutput = d\n")


def test_config_unknown_key_is_error(tmp_path):
    text = run_config_text(tmp_path) + "splat_radious = 0.1\n"
    with pytest.raises(ConfigError, match="splat_radious"):
        RunConfig.from_text(text)


def test_config_relative_paths_and_round_trip(tmp_path):
    (tmp_path / "run.cfg").write_text("version = 1\nbackground = bg\nlibrary = lib/l.csv\n"
                                      "maps = maps\noutput = out\ntarget.car = 3\n")
    cfg = RunConfig.from_file(tmp_path / "run.cfg")
    assert cfg.background == tmp_path / "bg" and cfg.targets == {"car": 3}
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_config_value_checks(tmp_path):
    base = run_config_text(tmp_path)
    for bad in ("dropout = 1.0", "frames = -1", "format = las", "master_seed = x"):
        with pytest.raises(ConfigError):
            RunConfig.from_text(base + bad + "\n")


def test_zero_frames_writes_manifest_only(tmp_path, demo_inputs):
    cfg = write_config(tmp_path / "run.cfg", demo_inputs, output=tmp_path / "out", frames=0)
    manifest = cmd_simulate(cfg)
    assert manifest["frames"] == []
    assert list((tmp_path / "out" / "frames").iterdir()) == []
    assert json.loads((tmp_path / "out" / "manifest.json").read_text()) == manifest


def test_same_seed_byte_identical(tmp_path, demo_inputs):
    a = write_config(tmp_path / "a.cfg", demo_inputs, output=tmp_path / "a")
    b = write_config(tmp_path / "b.cfg", demo_inputs, output=tmp_path / "b")
    cmd_simulate(a)
    cmd_simulate(b)
    ta, tb = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert len(ta) == 1 + 2 * 4
    assert ta == tb


def test_manifest_records(tmp_path, demo_inputs):
    cfg = write_config(tmp_path / "run.cfg", demo_inputs, output=tmp_path / "out", seed=5)
    manifest = cmd_simulate(cfg)
    assert [f["seed"] for f in manifest["frames"]] == [(5 << 32), (5 << 32) | 1]
    for f in manifest["frames"]:
        beams = f["beams"]
        assert beams["candidates"] == 115_200
        assert f["placed"] == {"car": 4, "pedestrian": 2}
        meta = json.loads((tmp_path / "out" / "frames" / f"{f['index']:06d}" /
                           "meta.json").read_text())
        assert meta["config_hash"] == manifest["config_hash"]
        assert meta["seed"] == f["seed"]


def test_beam_accounting_over_ten_frames(tmp_path, demo_inputs):
    cfg = write_config(tmp_path / "run.cfg", demo_inputs, output=tmp_path / "out", frames=10)
    manifest = cmd_simulate(cfg)
    pre = []
    for f in manifest["frames"]:
        b = f["beams"]
        assert b["emitted"] == b["candidates"] - b["sky"] - b["out_of_range"] - b["below_threshold"]
        assert f["points_before_dropout"] == f["points"] == b["emitted"]
        pre.append(f["points_before_dropout"])
    assert 0.5 * 115_200 < np.mean(pre) < 115_200


def test_dropout_and_kitti_output(tmp_path, demo_inputs):
    cfg = write_config(tmp_path / "run.cfg", demo_inputs, output=tmp_path / "out", frames=1,
                       dropout=0.5, format="kitti-like")
    manifest = cmd_simulate(cfg)
    f = manifest["frames"][0]
    assert abs(f["points"] / f["points_before_dropout"] - 0.5) < 0.01
    frame_dir = tmp_path / "out" / "frames" / "000000"
    assert sorted(p.name for p in frame_dir.iterdir()) == ["label.txt", "velodyne.bin"]
    assert (frame_dir / "velodyne.bin").stat().st_size == 16 * f["points"]


def test_missing_input_fails_before_writing(tmp_path, demo_inputs):
    text = run_config_text(demo_inputs, output=tmp_path / "out").replace(
        str(demo_inputs / "maps"), str(tmp_path / "nomaps"))
    with pytest.raises(ValidationError, match="maps"):
        cmd_simulate(RunConfig.from_text(text))
    assert not (tmp_path / "out").exists()


def test_stats_report_and_csv(tmp_path, demo_inputs):
    cfg = write_config(tmp_path / "run.cfg", demo_inputs, output=tmp_path / "out")
    manifest = cmd_simulate(cfg)
    report = cmd_stats(tmp_path / "out", tmp_path / "stats.csv")
    counts = [f["points"] for f in manifest["frames"]]
    lines = report.splitlines()
    assert lines[0] == "frames: 2"
    assert lines[1].startswith(f"points per frame: mean {np.mean(counts):.1f} "
                               f"std {np.std(counts, ddof=1):.1f}")
    assert "point-count histogram:" in lines
    hist = [int(ln.rsplit(": ", 1)[1]) for ln in lines if ln.startswith("  [")]
    assert sum(hist) == 2
    rows = list(csv.DictReader((tmp_path / "stats.csv").open()))
    assert [int(r["points"]) for r in rows] == counts
    labeled = sum(f["labeled_obstacles"] for f in manifest["frames"])
    assert sum(int(r[k]) for r in rows for k in r if k.startswith("obstacles.")) == labeled


def test_stats_single_frame_histogram(tmp_path, demo_inputs):
    cfg = write_config(tmp_path / "run.cfg", demo_inputs, output=tmp_path / "out", frames=1)
    manifest = cmd_simulate(cfg)
    n = manifest["frames"][0]["points"]
    report = cmd_stats(tmp_path / "out")
    assert f"  [{n - 0.5:.1f}, {n + 0.5:.1f}]: 1" in report.splitlines()


def test_stats_empty_dir(tmp_path):
    with pytest.raises(ValidationError):
        cmd_stats(tmp_path)
    assert run(["stats", str(tmp_path)]) == EXIT_VALIDATION


def test_stats_corrupt_bundle_is_runtime_error(tmp_path, capsys):
    bundle = tmp_path / "frames" / "000000"
    bundle.mkdir(parents=True)
    (bundle / "meta.json").write_text('{"points": 3, "obstacles": []}')
    (bundle / "points.bin").write_bytes(b"\0" * 7)
    (bundle / "aux.bin").write_bytes(b"")
    (bundle / "labels.txt").write_text("")
    assert run(["stats", str(tmp_path)]) == EXIT_RUNTIME
    assert "runtime error" in capsys.readouterr().err


def test_build_map_fixture_file(tmp_path):
    (tmp_path / "a.txt").write_text(f"car 2.5 2.5 0 {math.pi / 2!r}\n")
    sigma = 1.0 / math.sqrt(2.0 * math.log(2.0))
    code = run(["build-map", str(tmp_path / "a.txt"), str(tmp_path / "maps"),
                "--bounds", "0,0,5,5", "--cell", "1", "--k", "1", "--sigma", repr(sigma)])
    assert code == EXIT_OK
    assert [p.name for p in (tmp_path / "maps").iterdir()] == ["car.pmap"]
    pmap = ProbabilityMap.load(tmp_path / "maps" / "car.pmap")
    assert np.allclose(pmap.weights, FIXTURE_W, rtol=0, atol=1e-12)
    touched = pmap.weights > 0
    assert np.allclose(pmap.resolved_direction()[touched], math.pi / 2, atol=1e-12)


def test_build_map_one_file_per_category(tmp_path):
    (tmp_path / "a.txt").write_text("car 1 1 0 0\npedestrian 2 2 0 1\ncar 3 3 0 2\n")
    paths = cmd_build_map(tmp_path / "a.txt", tmp_path / "maps", bounds=(0, 0, 5, 5))
    assert [p.name for p in paths] == ["car.pmap", "pedestrian.pmap"]


def test_build_map_errors(tmp_path):
    (tmp_path / "empty.txt").write_text("# nothing\n")
    with pytest.raises(ValidationError, match="no annotations"):
        cmd_build_map(tmp_path / "empty.txt", tmp_path / "maps", bounds=(0, 0, 5, 5))
    assert run(["build-map", str(tmp_path / "empty.txt"), str(tmp_path / "m"),
                "--bounds", "0,0,5,5"]) == EXIT_VALIDATION
    (tmp_path / "far.txt").write_text("car 9 9 0 0\n")
    assert run(["build-map", str(tmp_path / "far.txt"), str(tmp_path / "m"),
                "--bounds", "0,0,5,5"]) == EXIT_VALIDATION
    assert not (tmp_path / "m").exists()


def test_calibrate_command(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["x,y,z,beam"]
    for beam, angle in ((0, -10.0), (1, -3.0), (2, 1.5)):
        el = np.radians(angle)
        for az in rng.uniform(-math.pi, math.pi, 50):
            r = rng.uniform(5, 50)
            rows.append(f"{r * math.cos(el) * math.cos(az)!r},{r * math.cos(el) * math.sin(az)!r},"
                        f"{r * math.sin(el)!r},{beam}")
    (tmp_path / "pts.csv").write_text("\n".join(rows) + "\n")
    assert run(["calibrate", str(tmp_path / "pts.csv"), str(tmp_path / "beams.csv")]) == EXIT_OK
    table = BeamTable.read_csv(tmp_path / "beams.csv")
    assert np.allclose(table.angles_deg, [-10.0, -3.0, 1.5], atol=1e-9)
    assert table.ids.tolist() == [0, 1, 2]
    with pytest.raises(ValidationError):
        cmd_calibrate(tmp_path / "pts.csv", tmp_path / "b2.csv", min_points=51)


def test_clean_background_stats_and_rerun(tmp_path, demo_inputs, demo_scan):
    stats = cmd_clean_background(demo_inputs / "scan.ply", tmp_path / "bg", fill_spacing=0.15,
                                 normal_radius=0.4)
    names = demo_scan.classes.names
    removed = {names[i]: int(c) for i, c in enumerate(np.bincount(demo_scan.labels))
               if c and names[i] in ("car", "truck", "cyclist", "pedestrian", "other")}
    assert removed["car"] > 0
    assert {k: v for k, v in stats["removed_per_class"].items() if v} == removed
    assert tree_bytes(tmp_path / "bg") == tree_bytes(demo_inputs / "background")
    cleaned = read_point_cloud(tmp_path / "bg" / "cloud.ply")
    assert stats["output_points"] == len(cleaned)


def test_clean_background_needs_labels(tmp_path, capsys):
    write_point_cloud(SemanticPointCloud(np.random.default_rng(0).normal(size=(20, 3)),
                                         has_labels=False), tmp_path / "raw.ply")
    assert run(["clean-background", str(tmp_path / "raw.ply"), str(tmp_path / "bg")]) \
        == EXIT_VALIDATION
    assert "labels" in capsys.readouterr().err
    assert not (tmp_path / "bg").exists()


def test_cli_simulate_and_bad_config(tmp_path, demo_inputs, capsys):
    cfg = write_config(tmp_path / "run.cfg", demo_inputs, output=tmp_path / "out", frames=1)
    assert run(["simulate", str(cfg)]) == EXIT_OK
    assert "simulated 1 frames" in capsys.readouterr().out
    (tmp_path / "bad.cfg").write_text("version = 1\nframes = 1\n")
    assert run(["simulate", str(tmp_path / "bad.cfg")]) == EXIT_VALIDATION
    assert "missing keys" in capsys.readouterr().err
    assert run(["simulate", str(tmp_path / "missing.cfg")]) == EXIT_VALIDATION


def test_workers_env_override(tmp_path, demo_inputs, monkeypatch):
    one = write_config(tmp_path / "one.cfg", demo_inputs, output=tmp_path / "one")
    two = write_config(tmp_path / "two.cfg", demo_inputs, output=tmp_path / "two")
    cmd_simulate(one)
    monkeypatch.setenv("AUGLIDAR_WORKERS", "2")
    cmd_simulate(two)
    assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")
    monkeypatch.setenv("AUGLIDAR_WORKERS", "zero")
    with pytest.raises(ValidationError):
        cmd_simulate(two)
