"""Pose containers, imitation rewards, evaluation metrics and the PPO clipped loss.

Quaternions are ``[w, x, y, z]``. Positions are meters, velocities m/s or rad/s.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

END_EFFECTORS = ("head", "left_hand", "right_hand", "left_foot", "right_foot")
ROOT = "root"
DEFAULT_KEYPOINTS_2D = ("hip", "shoulder", "head", "left_elbow", "right_elbow", "left_wrist",
                        "right_wrist", "left_knee", "right_knee", "left_ankle", "right_ankle")
_UNIT_TOL_STRICT = 1e-6
_UNIT_TOL = 1e-3


class PoseError(ValueError):
    """Mismatched or malformed pose data."""


def _vec(a, n: int | None, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1 or (n is not None and arr.shape[0] != n):
        raise PoseError(f"{name}: expected a {n or 'any'}-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise PoseError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


def _quat(q, name: str, tol: float = _UNIT_TOL_STRICT) -> np.ndarray:
    q = _vec(q, 4, name)
    if abs(np.linalg.norm(q) - 1.0) > tol:
        raise PoseError(f"{name}: quaternion norm {np.linalg.norm(q):.6g} is not 1")
    return q


@dataclass(frozen=True, eq=False)
class PoseFrame:
    root_pos: np.ndarray
    root_quat: np.ndarray
    joint_quats: Mapping[str, np.ndarray]
    joint_pos: Mapping[str, np.ndarray]
    end_effectors: Mapping[str, np.ndarray]
    lin_vel: np.ndarray
    ang_vel: np.ndarray
    joint_vel: np.ndarray

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)
        set_("root_pos", _vec(self.root_pos, 3, "root_pos"))
        set_("root_quat", _quat(self.root_quat, "root_quat"))
        set_("joint_quats", {k: _quat(v, f"joint_quats[{k}]") for k, v in self.joint_quats.items()})
        set_("joint_pos", {k: _vec(v, 3, f"joint_pos[{k}]") for k, v in self.joint_pos.items()})
        set_("end_effectors", {k: _vec(v, 3, f"end_effectors[{k}]") for k, v in self.end_effectors.items()})
        set_("lin_vel", _vec(self.lin_vel, 3, "lin_vel"))
        set_("ang_vel", _vec(self.ang_vel, 3, "ang_vel"))
        set_("joint_vel", _vec(self.joint_vel, None, "joint_vel"))
        if ROOT not in self.joint_pos:
            raise PoseError("joint_pos must include the root joint")

    @property
    def root_height(self) -> float:
        return float(self.root_pos[2])

    def to_dict(self) -> dict:
        as_list = lambda d: {k: v.tolist() for k, v in d.items()}
        return {
            "root_pos": self.root_pos.tolist(),
            "root_quat": self.root_quat.tolist(),
            "joint_quats": as_list(self.joint_quats),
            "joint_pos": as_list(self.joint_pos),
            "end_effectors": as_list(self.end_effectors),
            "lin_vel": self.lin_vel.tolist(),
            "ang_vel": self.ang_vel.tolist(),
            "joint_vel": self.joint_vel.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PoseFrame":
        fields_ = ("root_pos", "root_quat", "joint_quats", "joint_pos", "end_effectors",
                   "lin_vel", "ang_vel", "joint_vel")
        missing = [f for f in fields_ if f not in d]
        if missing:
            raise PoseError(f"pose frame is missing fields: {', '.join(missing)}")
        extra = sorted(set(d) - set(fields_))
        if extra:
            raise PoseError(f"pose frame has unknown fields: {', '.join(extra)}")
        return cls(**{f: d[f] for f in fields_})


@dataclass(frozen=True)
class PoseSequence:
    frames: tuple[PoseFrame, ...]
    rate: float = 30.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise PoseError("pose sequence must hold at least one frame")
        if not self.rate > 0:
            raise PoseError(f"rate must be > 0 (got {self.rate})")
        f0 = frames[0]
        for i, f in enumerate(frames[1:], 1):
            if (set(f.joint_quats) != set(f0.joint_quats) or set(f.joint_pos) != set(f0.joint_pos)
                    or f.joint_vel.shape != f0.joint_vel.shape):
                raise PoseError(f"frame {i}: joint set differs from frame 0")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)


@dataclass(frozen=True)
class Keypoints2D:
    """Named 2D keypoints, ``points[t, k] = (x, y)`` with y pointing up."""

    names: tuple[str, ...]
    points: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        names = tuple(self.names)
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[1:] != (len(names), 2):
            raise PoseError(f"points must have shape (T, {len(names)}, 2), got {pts.shape}")
        if len(set(names)) != len(names):
            raise PoseError("keypoint names must be unique")
        if not np.all(np.isfinite(pts)):
            raise PoseError("keypoints have non-finite entries")
        pts.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "points", pts)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise PoseError(f"keypoint {name!r} is missing") from None


@dataclass(frozen=True)
class RewardWeights:
    w_q: float = 0.5
    w_e: float = 0.3
    w_p: float = 0.1
    w_v: float = 0.1

    def __post_init__(self):
        for name in ("w_q", "w_e", "w_p", "w_v"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite value >= 0 (got {v})")


@dataclass(frozen=True)
class PpoConfig:
    epsilon: float = 0.2
    gamma: float = 0.95

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1) (got {self.epsilon})")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1] (got {self.gamma})")


@dataclass(frozen=True)
class Rewards:
    r_q: float
    r_e: float
    r_p: float
    r_v: float
    total: float


# ---------------------------------------------------------------------------
# quaternions

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rel_angle(q, q_hat) -> float:
    """Angle in ``[0, pi]`` of the rotation taking ``q_hat`` to ``q``.

    ``q`` and ``-q`` describe the same rotation and give 0.
    """
    q = _quat(q, "q", _UNIT_TOL)
    q_hat = _quat(q_hat, "q_hat", _UNIT_TOL)
    if np.array_equal(q, q_hat) or np.array_equal(q, -q_hat):
        return 0.0  # exact, the product below leaves round-off in the vector part
    r = quat_mul(q, quat_conj(q_hat))
    # atan2 stays accurate for small angles where acos(|w|) does not.
    return float(2.0 * math.atan2(np.linalg.norm(r[1:]), abs(r[0])))


# ---------------------------------------------------------------------------
# rewards

def _same_keys(a: Mapping, b: Mapping, what: str) -> list[str]:
    if set(a) != set(b):
        diff = sorted(set(a) ^ set(b))
        raise PoseError(f"{what} mismatch: {', '.join(diff)}")
    return sorted(a)


def reward_pose(frame: PoseFrame, gt: PoseFrame) -> float:
    names = _same_keys(frame.joint_quats, gt.joint_quats, "joint set")
    s = sum(quat_rel_angle(frame.joint_quats[j], gt.joint_quats[j]) ** 2 for j in names)
    return math.exp(-2.0 * s)


def reward_end_effector(frame: PoseFrame, gt: PoseFrame) -> float:
    s = 0.0
    for name in END_EFFECTORS:
        if name not in frame.end_effectors or name not in gt.end_effectors:
            raise PoseError(f"end-effector {name!r} is missing")
        s += float(np.sum((frame.end_effectors[name] - gt.end_effectors[name]) ** 2))
    return math.exp(-20.0 * s)


def reward_root_pose(frame: PoseFrame, gt: PoseFrame) -> float:
    dh = frame.root_height - gt.root_height
    ang = quat_rel_angle(frame.root_quat, gt.root_quat)
    return math.exp(-300.0 * (dh**2 + ang**2))


def reward_root_velocity(frame: PoseFrame, gt: PoseFrame) -> float:
    dl = float(np.sum((frame.lin_vel - gt.lin_vel) ** 2))
    dw = float(np.sum((frame.ang_vel - gt.ang_vel) ** 2))
    return math.exp(-dl - 0.1 * dw)


def reward_terms(frame: PoseFrame, gt: PoseFrame, w: RewardWeights = RewardWeights()) -> Rewards:
    r_q = reward_pose(frame, gt)
    r_e = reward_end_effector(frame, gt)
    r_p = reward_root_pose(frame, gt)
    r_v = reward_root_velocity(frame, gt)
    total = w.w_q * r_q + w.w_e * r_e + w.w_p * r_p + w.w_v * r_v
    return Rewards(r_q, r_e, r_p, r_v, total)


def total_reward(frame: PoseFrame, gt: PoseFrame, w: RewardWeights = RewardWeights()) -> float:
    return reward_terms(frame, gt, w).total


# ---------------------------------------------------------------------------
# metrics

def _check_pair(seq: PoseSequence, gt: PoseSequence) -> None:
    if len(seq) != len(gt):
        raise PoseError(f"sequence lengths differ: {len(seq)} vs {len(gt)}")


def mpjpe(seq: PoseSequence, gt: PoseSequence) -> float:
    """Root-relative mean per-joint position error in millimeters.

    The mean runs over every joint in ``joint_pos``, the root included.
    """
    _check_pair(seq, gt)
    total, count = 0.0, 0
    for f, g in zip(seq, gt):
        names = _same_keys(f.joint_pos, g.joint_pos, "joint set")
        rf, rg = f.joint_pos[ROOT], g.joint_pos[ROOT]
        for j in names:
            total += float(np.linalg.norm((f.joint_pos[j] - rf) - (g.joint_pos[j] - rg)))
            count += 1
    return 1000.0 * total / count


def normalize_keypoints(kp: Keypoints2D) -> Keypoints2D:
    """Move the hip to the origin and scale so the shoulder sits 0.5 above it."""
    hip, sh = kp.index("hip"), kp.index("shoulder")
    pts = kp.points
    origin = pts[:, hip : hip + 1, :]
    extent = np.abs(pts[:, sh, 1] - pts[:, hip, 1])
    if np.any(extent <= 1e-12):
        bad = int(np.flatnonzero(extent <= 1e-12)[0])
        raise PoseError(f"frame {bad}: shoulder and hip at the same height (degenerate pose)")
    out = (pts - origin) * (0.5 / extent)[:, None, None]
    return Keypoints2D(kp.names, out, normalized=True)


def keypoint_error_2d(kp: Keypoints2D, gt: Keypoints2D) -> float:
    if kp.names != gt.names:
        raise PoseError("keypoint name lists differ")
    if kp.points.shape != gt.points.shape:
        raise PoseError(f"keypoint arrays differ in shape: {kp.points.shape} vs {gt.points.shape}")
    a = kp if kp.normalized else normalize_keypoints(kp)
    b = gt if gt.normalized else normalize_keypoints(gt)
    return float(np.mean(np.linalg.norm(a.points - b.points, axis=-1)))


def _dof_velocity(f: PoseFrame) -> np.ndarray:
    return np.concatenate([f.lin_vel, f.ang_vel, f.joint_vel])


def velocity_error(seq: PoseSequence, gt: PoseSequence) -> float:
    _check_pair(seq, gt)
    errs = []
    for f, g in zip(seq, gt):
        a, b = _dof_velocity(f), _dof_velocity(g)
        if a.shape != b.shape:
            raise PoseError(f"velocity DoF counts differ: {a.size} vs {b.size}")
        errs.append(float(np.linalg.norm(a - b)))
    return float(np.mean(errs))


def avg_acceleration(seq: PoseSequence) -> float:
    """Mean absolute joint acceleration from forward differences of ``joint_vel``.

    The last frame reuses the preceding difference; a one-frame sequence has
    no motion information and returns 0.
    """
    v = np.stack([f.joint_vel for f in seq])
    T, N = v.shape
    if N == 0:
        raise PoseError("no actuated DoFs")
    if T < 2:
        return 0.0
    acc = np.diff(v, axis=0) * seq.rate
    acc = np.concatenate([acc, acc[-1:]], axis=0)
    return float(np.abs(acc).sum() / (T * N))


# ---------------------------------------------------------------------------
# PPO

def ppo_clip_loss(w, A, eps: float = 0.2):
    """Clipped surrogate ``min(w A, clip(w, 1 - eps, 1 + eps) A)``, element-wise."""
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1) (got {eps})")
    w = np.asarray(w, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    out = np.minimum(w * A, np.clip(w, 1.0 - eps, 1.0 + eps) * A)
    return float(out) if out.ndim == 0 else out


def discounted_return(rewards: Sequence[float], gamma: float = 0.95) -> np.ndarray:
    """Reward-to-go ``G_t = sum_k gamma**k r_{t+k}`` for each step."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1] (got {gamma})")
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


# ---------------------------------------------------------------------------
# JSON-lines I/O

def _read_jsonl(path) -> list[dict]:
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise PoseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    if not rows:
        raise PoseError(f"{path}: no frames")
    return rows


def read_pose_jsonl(path, rate: float = 30.0) -> PoseSequence:
    rows = _read_jsonl(path)
    frames = []
    for i, row in enumerate(rows):
        try:
            frames.append(PoseFrame.from_dict(row))
        except (PoseError, TypeError) as exc:
            raise PoseError(f"{path}: frame {i}: {exc}") from None
    return PoseSequence(tuple(frames), rate)


def write_pose_jsonl(seq: Iterable[PoseFrame], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for f in seq:
            fh.write(json.dumps(f.to_dict(), sort_keys=True) + "\n")


def read_keypoints_jsonl(path) -> Keypoints2D:
    """One object per line mapping keypoint name to ``[x, y]``."""
    rows = _read_jsonl(path)
    names = tuple(rows[0])
    for i, row in enumerate(rows):
        if set(row) != set(names):
            raise PoseError(f"{path}: frame {i}: keypoint names differ from frame 0")
    pts = np.array([[row[n] for n in names] for row in rows], dtype=np.float64)
    return Keypoints2D(names, pts)


def write_keypoints_jsonl(kp: Keypoints2D, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in range(kp.points.shape[0]):
            fh.write(json.dumps({n: kp.points[t, k].tolist() for k, n in enumerate(kp.names)}) + "\n")
