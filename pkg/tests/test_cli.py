import json

import numpy as np
import pytest

from src.cli import EXIT_INPUT, EXIT_OK, build_parser, run
from src.pose import Trajectory
from src.utils.io import read_color_png, read_csv, read_depth_png
from src.voxel_grid import GridGeometry, VoxelGrid

from tests.helpers import circle_poses, small_intrinsics

GRID_SCENE = {
    "kind": "grid",
    "cells": 8,
    "smooth": 1.0,
    "clear_radius": 0.35,
    "camera": {"width": 16, "height": 12},
    "trajectory": {"kind": "circle", "num_frames": 3, "center": [0.0, 0.0, 0.0], "radius": 0.3},
}


@pytest.fixture
def synth_dir(tmp_path):
    spec = tmp_path / "scene.json"
    spec.write_text(json.dumps(GRID_SCENE))
    out = tmp_path / "ds"
    assert run(["synth", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    return out


def test_help_and_unknown_command(capsys):
    with pytest.raises(SystemExit) as e:
        build_parser().parse_args(["--help"])
    assert e.value.code == 0
    assert "gradcheck" in capsys.readouterr().out
    with pytest.raises(SystemExit) as e:
        run(["frobnicate"])
    assert e.value.code == 2


def test_gradcheck_command(tmp_path):
    out = tmp_path / "gradcheck.txt"
    assert run(["gradcheck", "--cells", "4", "--rays", "3", "--max-params", "60", "--out", str(out)]) == EXIT_OK
    text = out.read_text()
    assert text.startswith("# gradcheck rays=3")
    assert "## ray parameters" in text


def test_synth_writes_dataset(synth_dir):
    assert (synth_dir / "generator.vxgf").exists()
    assert len(list((synth_dir / "color").glob("*.png"))) == 3
    assert len((synth_dir / "poses.txt").read_text().splitlines()) == 4


def test_malformed_spec_exits_2(tmp_path):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps({"kind": "grid", "cells": -1}))
    assert run(["synth", "--spec", str(spec), "--out", str(tmp_path / "x")]) == EXIT_INPUT
    assert run(["synth", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == EXIT_INPUT


def test_map_track_eval(synth_dir, tmp_path):
    grid = tmp_path / "map.vxgf"
    rc = run([
        "map", "--dataset", str(synth_dir), "--out", str(grid),
        "--iterations", "2", "--rays", "64", "--schedule", "4", "--keyframe-stride", "1",
    ])
    assert rc == EXIT_OK
    assert max(VoxelGrid.load(grid).geometry.cells) == 4
    log_rows = read_csv(tmp_path / "map.csv")
    assert len(log_rows) == 2

    traj = tmp_path / "est.txt"
    rc = run([
        "track", "--grid", str(synth_dir / "generator.vxgf"), "--dataset", str(synth_dir),
        "--out", str(traj), "--iterations", "2", "--rays", "64",
    ])
    assert rc == EXIT_OK
    assert len(Trajectory.load_tum(traj)) == 3
    status = (tmp_path / "est.csv").read_text().splitlines()
    assert status[0].startswith("# config {")

    report = tmp_path / "report.json"
    rc = run(["eval", "--trajectory", str(traj), "--dataset", str(synth_dir), "--out", str(report)])
    assert rc == EXIT_OK
    assert json.loads(report.read_text())["n_poses"] == 3


def test_eval_identical_trajectories(tmp_path, capsys):
    ref = Trajectory([0.1 * i for i in range(8)], circle_poses(8)).save_tum(tmp_path / "ref.txt")
    assert run(["eval", "--trajectory", str(ref), "--reference", str(ref)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "ate_rmse" in out
    line = next(ln for ln in out.splitlines() if ln.startswith("ate_rmse "))
    assert float(line.split()[1]) == pytest.approx(0.0, abs=1e-9)

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mapping": {"no_such_field": 1}}))
    assert run(["eval", "--trajectory", str(ref), "--reference", str(ref), "--config", str(bad)]) == EXIT_INPUT


def test_corrupt_grid_exits_2(synth_dir, tmp_path):
    bad = tmp_path / "bad.vxgf"
    bad.write_bytes(b"VXGF" + b"\x00" * 10)
    rc = run(["track", "--grid", str(bad), "--dataset", str(synth_dir), "--out", str(tmp_path / "t.txt")])
    assert rc == EXIT_INPUT


def test_untrackable_first_frame_exits_3(synth_dir, tmp_path):
    empty = VoxelGrid.constant(GridGeometry.cube(3, 0.5, origin=(5.0, 5.0, 5.0)), sigma=0.0)
    path = empty.save(tmp_path / "empty.vxgf")
    rc = run(["track", "--grid", str(path), "--dataset", str(synth_dir), "--out", str(tmp_path / "t.txt")])
    assert rc == 3


def test_render_empty_grid(tmp_path):
    grid = VoxelGrid.constant(GridGeometry.cube(3, 0.5), sigma=0.0).save(tmp_path / "g.vxgf")
    intr = tmp_path / "intr.json"
    intr.write_text(small_intrinsics().model_dump_json())
    prefix = tmp_path / "view"
    rc = run([
        "render", "--grid", str(grid), "--intrinsics", str(intr),
        "--pose", "0.5 0.5 -1 0 0 0 1", "--out", str(prefix),
    ])
    assert rc == EXIT_OK
    color = read_color_png(tmp_path / "view_color.png")
    depth = read_depth_png(tmp_path / "view_depth.png", 1000.0)
    assert color.shape == (12, 16, 3)
    assert not color.any()
    assert not depth.any()


def test_render_needs_a_pose_source(tmp_path):
    grid = VoxelGrid.constant(GridGeometry.cube(3, 0.5), sigma=0.0).save(tmp_path / "g.vxgf")
    assert run(["render", "--grid", str(grid), "--out", str(tmp_path / "v")]) == EXIT_INPUT


def test_render_takes_march_settings_and_threads_from_config(tmp_path):
    grid = VoxelGrid.constant(GridGeometry.cube(3, 0.5), sigma=50.0).save(tmp_path / "g.vxgf")
    intr = tmp_path / "intr.json"
    intr.write_text(small_intrinsics().model_dump_json())
    base = ["render", "--grid", str(grid), "--intrinsics", str(intr), "--pose", "0.5 0.5 -1 0 0 0 1"]

    assert run(base + ["--out", str(tmp_path / "near")]) == EXIT_OK
    assert read_color_png(tmp_path / "near_color.png").any()

    far = tmp_path / "far.json"
    far.write_text(json.dumps({"threads": 2, "mapping": {"t_near": 5.0, "t_far": 6.0}}))
    assert run(base + ["--config", str(far), "--out", str(tmp_path / "far")]) == EXIT_OK
    assert not read_color_png(tmp_path / "far_color.png").any()
    assert not read_depth_png(tmp_path / "far_depth.png", 1000.0).any()

    bad = tmp_path / "bad.toml"
    bad.write_text("threads = 0\n")
    assert run(base + ["--config", str(bad), "--out", str(tmp_path / "bad")]) == EXIT_INPUT


def test_sweep_command(synth_dir, tmp_path):
    out = tmp_path / "sweep.csv"
    rc = run([
        "sweep", "--grid", str(synth_dir / "generator.vxgf"), "--dataset", str(synth_dir),
        "--rays", "16,32", "--iters", "1", "--rpe-interval", "0.1", "--out", str(out),
    ])
    assert rc == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# config {") and "spearman" in lines[0]
    assert len(read_csv(out)) == 2
    assert np.isfinite(float(read_csv(out)[0]["ate_m"]))
