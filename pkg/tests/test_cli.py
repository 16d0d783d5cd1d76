from __future__ import annotations

import csv
import io
import json
import math

import numpy as np
import pytest
from PIL import Image

from conftest import JOINTS, axis_angle_quat, make_frame, replace_frame
from nlospose.cli import main
from nlospose.lct import build_psf, forward_project
from nlospose.pose import PoseSequence, quat_mul, write_pose_jsonl
from nlospose.volumes import (
    AxisKind,
    GridSpec,
    ReflectanceVolume,
    TransientImage,
    frame_filename,
    read_volume,
    write_depth_png,
    write_volume,
)

SMALL = {"nx": 8, "ny": 8, "nt": 16, "nz": 16, "wall_width_m": 1.0, "bin_width_s": 2.5e-10}
MEDIUM = {"nx": 16, "ny": 16, "nt": 32, "nz": 32, "wall_width_m": 1.0, "bin_width_s": 2.5e-10}


def write_config(path, grid=SMALL, **sections):
    lines = ["[grid]"] + [f"{k} = {v}" for k, v in grid.items()]
    for name, body in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {v}" for k, v in body.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# --- psf --------------------------------------------------------------------

def test_psf_dims_and_determinism(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    assert main(["--config", cfg, "psf", "-o", str(tmp_path / "a.nlvt")]) == 0
    assert main(["--config", cfg, "psf", "-o", str(tmp_path / "b.nlvt")]) == 0
    vol = read_volume(tmp_path / "a.nlvt")
    assert isinstance(vol, ReflectanceVolume) and vol.axis is AxisKind.U
    assert vol.data.shape == (16, 16, 32)
    assert (tmp_path / "a.nlvt").read_bytes() == (tmp_path / "b.nlvt").read_bytes()
    manifest = json.loads((tmp_path / "a.nlvt.manifest.json").read_text())
    assert len(manifest["config_sha256"]) == 64


def test_psf_zero_bin_width(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", grid={**SMALL, "bin_width_s": 0})
    assert main(["--config", cfg, "psf", "-o", str(tmp_path / "a.nlvt")]) == 1
    assert "bin_width_s" in capsys.readouterr().err


def test_unknown_config_key_exit_1(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", lct={"alfa": 1})
    assert main(["--config", cfg, "psf", "-o", str(tmp_path / "a.nlvt")]) == 1
    assert "unknown key 'lct.alfa'" in capsys.readouterr().err


def test_usage_error_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["nosuchcommand"])
    assert exc.value.code == 1


def test_missing_config_exit_1(tmp_path):
    assert main(["psf", "-o", str(tmp_path / "a.nlvt")]) == 1


# --- synth ------------------------------------------------------------------

def make_depth_dir(d, n=3, shape=(8, 8)):
    d.mkdir()
    for i in range(n):
        units = np.zeros(shape, dtype=np.uint16)
        units[2:6, 3:7] = 1100 + 50 * i
        write_depth_png(units, d / f"depth_{i:03d}.png")
    return d


def test_synth_levels_and_files(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    depth = make_depth_dir(tmp_path / "depth", n=3)
    assert main(["--config", cfg, "--seed", "3", "synth", str(depth), "-o", str(tmp_path / "out")]) == 0
    dirs = sorted(p for p in (tmp_path / "out").iterdir() if p.is_dir())
    assert len(dirs) == 5
    for d in dirs:
        assert sorted(p.name for p in d.iterdir()) == [frame_filename(i) for i in range(3)]
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["config"]["augment"]["seed"] == 3
    assert [lv["frames"] for lv in manifest["levels"]] == [3] * 5
    frame = read_volume(dirs[0] / frame_filename(1))
    assert isinstance(frame, TransientImage) and frame.t_start == pytest.approx(1 / 30)


def test_synth_empty_dir(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini")
    (tmp_path / "empty").mkdir()
    assert main(["--config", cfg, "synth", str(tmp_path / "empty"), "-o", str(tmp_path / "out")]) == 2
    assert "no" in capsys.readouterr().err


def test_synth_enumerates_bad_files(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini")
    depth = make_depth_dir(tmp_path / "depth", n=1)
    Image.new("L", (8, 8)).save(depth / "bad_a.png")
    Image.new("RGB", (8, 8)).save(depth / "bad_b.png")
    assert main(["--config", cfg, "synth", str(depth), "-o", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert "2 unreadable" in err and "bad_a.png" in err and "bad_b.png" in err


def test_synth_parallel_matches_serial(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    depth = make_depth_dir(tmp_path / "depth", n=4)
    assert main(["--config", cfg, "synth", str(depth), "-o", str(tmp_path / "a")]) == 0
    assert main(["--config", cfg, "--jobs", "4", "synth", str(depth), "-o", str(tmp_path / "b")]) == 0
    ta, tb = tree(tmp_path / "a"), tree(tmp_path / "b")
    ta.pop("manifest.json"), tb.pop("manifest.json")  # records --jobs
    assert ta == tb


def test_synth_with_rescan(tmp_path):
    cfg = write_config(tmp_path / "c.ini", augment={"shift_levels": "0"})
    depth = make_depth_dir(tmp_path / "depth", n=30)
    assert main(["--config", cfg, "synth", str(depth), "-o", str(tmp_path / "out"), "--rescan"]) == 0
    (level,) = [p for p in (tmp_path / "out").iterdir() if p.is_dir()]
    assert len(list(level.iterdir())) == 23  # 30 frames -> 4 scans -> 23 policy frames
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["schedule"]["scan_rate_hz"] == 4.0


# --- reconstruct ------------------------------------------------------------

def _transient_dir(d, frames):
    d.mkdir()
    for i, f in enumerate(frames):
        write_volume(f, d / frame_filename(i))
    return d


def _png(path):
    return np.asarray(Image.open(path))


def test_reconstruct_zero_is_black(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    g = GridSpec(**SMALL)
    src = _transient_dir(tmp_path / "tau", [TransientImage(g, np.zeros(g.transient_shape))])
    assert main(["--config", cfg, "reconstruct", str(src), "-o", str(tmp_path / "out")]) == 0
    img = _png(tmp_path / "out" / "png" / "frame_00000.png")
    assert img.dtype == np.uint8 and img.shape == (8, 8) and not img.any()


def test_reconstruct_single_voxel_blob(tmp_path):
    cfg = write_config(tmp_path / "c.ini", grid=MEDIUM, lct={"alpha": 100})
    g = GridSpec(**MEDIUM)
    rho = np.zeros(g.volume_shape)
    rho[11, 4, 22] = 100.0
    tau = forward_project(ReflectanceVolume(g, rho, AxisKind.Z), build_psf(g))
    src = _transient_dir(tmp_path / "tau", [tau])
    assert main(["--config", cfg, "reconstruct", str(src), "-o", str(tmp_path / "out")]) == 0
    img = _png(tmp_path / "out" / "png" / "frame_00000.png")
    # image rows are y, columns are x
    assert np.unravel_index(np.argmax(img), img.shape) == (4, 11)
    assert img.max() == 255
    hm = read_volume(tmp_path / "out" / "heatmaps" / frame_filename(0))
    assert np.unravel_index(np.argmax(hm.data), hm.data.shape) == (11, 4)


def test_reconstruct_zero_correction_identical(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    g = GridSpec(**SMALL)
    tau = TransientImage(g, np.random.default_rng(0).poisson(2.0, g.transient_shape))
    src = _transient_dir(tmp_path / "tau", [tau])
    pg = g.with_dims(nx=16, ny=16, nt=32, nz=32, wall_width_m=2.0)
    write_volume(ReflectanceVolume(pg, np.zeros((16, 16, 32)), AxisKind.U), tmp_path / "corr.nlvt")
    assert main(["--config", cfg, "reconstruct", str(src), "-o", str(tmp_path / "a")]) == 0
    assert main(["--config", cfg, "reconstruct", str(src), "-o", str(tmp_path / "b"),
                 "--correction", str(tmp_path / "corr.nlvt")]) == 0
    assert tree(tmp_path / "a" / "png") == tree(tmp_path / "b" / "png")


def test_reconstruct_with_psf_file(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    g = GridSpec(**SMALL)
    tau = TransientImage(g, np.random.default_rng(1).poisson(2.0, g.transient_shape))
    src = _transient_dir(tmp_path / "tau", [tau])
    assert main(["--config", cfg, "psf", "-o", str(tmp_path / "psf.nlvt")]) == 0
    assert main(["--config", cfg, "reconstruct", str(src), "-o", str(tmp_path / "a")]) == 0
    assert main(["--config", cfg, "reconstruct", str(src), "-o", str(tmp_path / "b"),
                 "--psf", str(tmp_path / "psf.nlvt")]) == 0
    assert tree(tmp_path / "a" / "volumes") == tree(tmp_path / "b" / "volumes")


def test_reconstruct_errors(tmp_path):
    cfg = write_config(tmp_path / "c.ini")
    g = GridSpec(**SMALL)
    src = _transient_dir(tmp_path / "tau", [TransientImage(g, np.zeros(g.transient_shape))])
    assert main(["--config", cfg, "reconstruct", str(src), "-o", str(tmp_path / "o"),
                 "--psf", str(tmp_path / "nope.nlvt")]) == 2
    assert main(["--config", cfg, "reconstruct", str(src), "-o", str(tmp_path / "o"), "--alpha", "0"]) == 1


def test_reconstruct_global_max(tmp_path):
    cfg = write_config(tmp_path / "c.ini", grid=MEDIUM, lct={"alpha": 100})
    g = GridSpec(**MEDIUM)
    psf = build_psf(g)
    frames = []
    for i, amp in enumerate((100.0, 50.0)):
        rho = np.zeros(g.volume_shape)
        rho[8, 8, 22] = amp
        frames.append(forward_project(ReflectanceVolume(g, rho, AxisKind.Z), psf, t_start=i / 30))
    src = _transient_dir(tmp_path / "tau", frames)
    assert main(["--config", cfg, "reconstruct", str(src), "-o", str(tmp_path / "out"), "--global-max"]) == 0
    a = _png(tmp_path / "out" / "png" / "frame_00000.png").max()
    b = _png(tmp_path / "out" / "png" / "frame_00001.png").max()
    assert a == 255 and abs(int(b) - 128) <= 1


# --- resample ---------------------------------------------------------------

def test_resample_static_round_trip(tmp_path):
    g = GridSpec(**SMALL)
    base = np.random.default_rng(2).random(g.transient_shape)
    src = _transient_dir(tmp_path / "hi", [TransientImage(g, base, i / 30) for i in range(30)])
    assert main(["resample", str(src), "-o", str(tmp_path / "lo"), "--from-hz", "30", "--to-hz", "4"]) == 0
    assert main(["resample", str(tmp_path / "lo"), "-o", str(tmp_path / "up"), "--from-hz", "4", "--to-hz", "30"]) == 0
    lo = sorted((tmp_path / "lo").glob("*.nlvt"))
    up = sorted((tmp_path / "up").glob("*.nlvt"))
    assert len(lo) == 4 and len(up) == 23
    for p in up:
        assert read_volume(p).data.tobytes() == np.float32(base).tobytes()
    manifest = json.loads((tmp_path / "up" / "manifest.json").read_text())
    assert manifest["schedule"]["order"] == "row-major"


def test_resample_rate_errors(tmp_path):
    g = GridSpec(**SMALL)
    src = _transient_dir(tmp_path / "hi", [TransientImage(g, np.zeros(g.transient_shape), i / 30) for i in range(3)])
    assert main(["resample", str(src), "-o", str(tmp_path / "o"), "--from-hz", "30", "--to-hz", "30"]) == 1
    assert main(["resample", str(src), "-o", str(tmp_path / "o"), "--from-hz", "30", "--to-hz", "-4"]) == 1
    # three 30 Hz frames cannot cover a 0.25 s scan
    assert main(["resample", str(src), "-o", str(tmp_path / "o"), "--from-hz", "30", "--to-hz", "4"]) == 2


# --- metrics / reward -------------------------------------------------------

def _pose_files(tmp_path, est_frames, gt_frames):
    write_pose_jsonl(est_frames, tmp_path / "est.jsonl")
    write_pose_jsonl(gt_frames, tmp_path / "gt.jsonl")
    return str(tmp_path / "est.jsonl"), str(tmp_path / "gt.jsonl")


def _report(text):
    return {k: float(v) for k, v in (line.split("=") for line in text.strip().splitlines())}


def test_metrics_identical(tmp_path, capsys, pose_seq):
    est, gt = _pose_files(tmp_path, pose_seq, pose_seq)
    assert main(["metrics", est, gt, "--csv", str(tmp_path / "m.csv")]) == 0
    rep = _report(capsys.readouterr().out)
    assert rep["mpjpe_mm"] == 0 and rep["e_vel"] == 0
    assert rep["a_accl"] > 0  # reflects the motion itself
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["mpjpe_mm", "e_vel", "a_accl"]


def test_metrics_one_frame_fixture(tmp_path, capsys):
    gt = make_frame()
    est = replace_frame(gt, joint_pos={**gt.joint_pos, JOINTS[0]: gt.joint_pos[JOINTS[0]] + [0.010, 0, 0]})
    e, g = _pose_files(tmp_path, [est], [gt])
    assert main(["metrics", e, g]) == 0
    assert _report(capsys.readouterr().out)["mpjpe_mm"] == pytest.approx(0.5, abs=1e-9)


def test_metrics_keypoints(tmp_path, capsys, pose_seq):
    from nlospose.pose import Keypoints2D, write_keypoints_jsonl

    pts = np.random.default_rng(0).normal(size=(2, 3, 2))
    pts[:, 1, 1] = pts[:, 0, 1] + 1
    write_keypoints_jsonl(Keypoints2D(("hip", "shoulder", "head"), pts), tmp_path / "k1.jsonl")
    write_keypoints_jsonl(Keypoints2D(("hip", "shoulder", "head"), pts * 2), tmp_path / "k2.jsonl")
    est, gt = _pose_files(tmp_path, pose_seq, pose_seq)
    assert main(["metrics", est, gt, "--keypoints2d", str(tmp_path / "k1.jsonl"), str(tmp_path / "k2.jsonl")]) == 0
    assert _report(capsys.readouterr().out)["e_key"] == pytest.approx(0.0, abs=1e-9)


def test_metrics_length_mismatch(tmp_path, capsys, pose_seq):
    est, gt = _pose_files(tmp_path, pose_seq.frames[:2], pose_seq)
    assert main(["metrics", est, gt]) == 2
    assert "lengths differ" in capsys.readouterr().err


def _reward_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_reward_identity_and_zero_weights(tmp_path, capsys, pose_seq):
    est, gt = _pose_files(tmp_path, pose_seq, pose_seq)
    assert main(["reward", est, gt]) == 0
    rows = _reward_rows(capsys.readouterr().out)
    assert len(rows) == len(pose_seq)
    assert all(float(r["total"]) == pytest.approx(1.0, abs=1e-12) for r in rows)
    assert main(["reward", est, gt, "--weights", "0,0,0,0", "-o", str(tmp_path / "r.csv")]) == 0
    rows = _reward_rows((tmp_path / "r.csv").read_text())
    assert all(float(r["total"]) == 0.0 for r in rows)


def test_reward_perturbed_joint(tmp_path, capsys):
    gt = make_frame()
    q = gt.joint_quats[JOINTS[2]]
    est = replace_frame(gt, joint_quats={**gt.joint_quats, JOINTS[2]: quat_mul(axis_angle_quat([0, 0, 1], 0.5), q)})
    e, g = _pose_files(tmp_path, [est], [gt])
    assert main(["reward", e, g]) == 0
    (row,) = _reward_rows(capsys.readouterr().out)
    assert float(row["r_q"]) == pytest.approx(math.exp(-0.5), abs=1e-9)
    assert float(row["total"]) == pytest.approx(0.5 * math.exp(-0.5) + 0.5, abs=1e-9)


def test_reward_bad_weights(tmp_path, pose_seq):
    est, gt = _pose_files(tmp_path, pose_seq, pose_seq)
    assert main(["reward", est, gt, "--weights", "1,2"]) == 1
    assert main(["reward", est, gt, "--weights=-1,0,0,0"]) == 1
