"""Raster-scan timing and the high-rate <-> scan-rate temporal resampling.

A confocal scanner visits the wall points one after another, so a single
"frame" mixes columns captured at different instants. ``downsample_to_scan_rate``
reproduces that from a high-rate sequence; ``upsample_to_policy_rate``
assembles policy-rate frames from the slow captures. Both only ever copy
whole transient columns.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .volumes import FrameSequence, GridSpec, TransientImage

# Tolerance for floor/ceil on times that should land exactly on a boundary.
_EPS = 1e-9


class ScanOrder(str, enum.Enum):
    ROW_MAJOR = "row-major"
    SERPENTINE = "serpentine"


@dataclass(frozen=True, eq=False)
class RasterSchedule:
    """Per-point scan times within one frame.

    ``offsets[x, y]`` is the time (seconds after frame start) at which wall
    point ``(x, y)`` is measured. Points are visited with x fastest.
    """

    grid: GridSpec
    scan_rate: float
    order: ScanOrder
    offsets: np.ndarray = field(repr=False)

    @property
    def dwell_s(self) -> float:
        return 1.0 / (self.scan_rate * self.grid.nx * self.grid.ny)

    @property
    def frame_period(self) -> float:
        return 1.0 / self.scan_rate

    def scan_sequence(self) -> list[tuple[int, int]]:
        """Wall points in visiting order."""
        flat = np.argsort(self.offsets, axis=None, kind="stable")
        xs, ys = np.unravel_index(flat, self.offsets.shape)
        return list(zip(xs.tolist(), ys.tolist()))

    def to_dict(self) -> dict:
        return {
            "scan_rate_hz": self.scan_rate,
            "order": self.order.value,
            "dwell_s": self.dwell_s,
            "nx": self.grid.nx,
            "ny": self.grid.ny,
        }


def build_schedule(grid: GridSpec, scan_rate: float = 4.0,
                   order: ScanOrder | str = ScanOrder.ROW_MAJOR) -> RasterSchedule:
    if not scan_rate > 0 or not math.isfinite(scan_rate):
        raise ValueError(f"scan_rate must be > 0 (got {scan_rate})")
    order = ScanOrder(order)
    nx, ny = grid.nx, grid.ny
    x = np.arange(nx)[:, None]
    y = np.arange(ny)[None, :]
    if order is ScanOrder.SERPENTINE:
        x = np.where(y % 2 == 1, nx - 1 - x, x)
    step = y * nx + x
    dwell = 1.0 / (scan_rate * nx * ny)
    offsets = (step * dwell).astype(np.float64)
    offsets.setflags(write=False)
    return RasterSchedule(grid, float(scan_rate), order, offsets)


def _check_grid(seq: FrameSequence, sched: RasterSchedule) -> None:
    for f in seq:
        if f.data.shape[:2] != (sched.grid.nx, sched.grid.ny):
            raise ValueError(f"frame lateral shape {f.data.shape[:2]} does not match schedule "
                             f"({sched.grid.nx}, {sched.grid.ny})")


def downsample_to_scan_rate(frames_hi: FrameSequence, sched: RasterSchedule) -> FrameSequence:
    """Simulate raster-scanned captures from a high-rate sequence.

    Output frame ``k`` starts at ``t0 + k / scan_rate``; column ``(x, y)`` is
    copied from the high-rate frame active at ``t_start + offset(x, y)``.
    Only output frames whose whole scan interval is covered are produced.

    Raises
    ------
    ValueError
        If not even the first scan interval is covered.
    """
    if len(frames_hi) == 0:
        raise ValueError("high-rate sequence is empty")
    _check_grid(frames_hi, sched)
    hi_rate = frames_hi.rate
    t0 = frames_hi[0].t_start
    t_end = t0 + len(frames_hi) / hi_rate
    period = sched.frame_period
    n_out = int(math.floor((t_end - t0) / period + _EPS))
    if n_out < 1:
        raise ValueError(f"high-rate frames cover [{t0:.6g}, {t_end:.6g}) s but a scan needs "
                         f"[{t0:.6g}, {t0 + period:.6g}) s; missing [{t_end:.6g}, {t0 + period:.6g}) s")

    stack = np.stack([f.data for f in frames_hi])
    xs, ys = np.indices(sched.offsets.shape)
    out = []
    for k in range(n_out):
        rel = k * period + sched.offsets  # time since t0 of each point's measurement
        src = np.floor(rel * hi_rate + _EPS).astype(np.int64)
        src = np.minimum(src, len(frames_hi) - 1)
        out.append(TransientImage(frames_hi[0].grid, stack[src, xs, ys], t0 + k * period))
    return FrameSequence(tuple(out), sched.scan_rate)


def upsample_to_policy_rate(frames_lo: FrameSequence, sched: RasterSchedule,
                            out_rate: float = 30.0) -> FrameSequence:
    """Assemble policy-rate frames from scan-rate captures.

    Output frame ``j`` spans ``[t0 + j / out_rate, t0 + j / out_rate + 1 / scan_rate)``;
    column ``(x, y)`` comes from the capture whose scan of that point falls in
    the span. The sequence stops at the last fully covered frame.
    """
    if len(frames_lo) == 0:
        raise ValueError("scan-rate sequence is empty")
    if not out_rate > 0:
        raise ValueError(f"out_rate must be > 0 (got {out_rate})")
    _check_grid(frames_lo, sched)
    if abs(frames_lo.rate - sched.scan_rate) > 1e-9:
        raise ValueError(f"sequence rate {frames_lo.rate} Hz differs from schedule rate {sched.scan_rate} Hz")
    n_lo = len(frames_lo)
    t0 = frames_lo[0].t_start
    sr = sched.scan_rate
    # Point with offset 0 needs capture ceil(j sr / out_rate) <= n_lo - 1.
    n_out = int(math.floor((n_lo - 1) * out_rate / sr + _EPS)) + 1

    stack = np.stack([f.data for f in frames_lo])
    xs, ys = np.indices(sched.offsets.shape)
    out = []
    for j in range(n_out):
        start = j / out_rate
        src = np.ceil((start - sched.offsets) * sr - _EPS).astype(np.int64)
        src = np.clip(src, 0, n_lo - 1)
        out.append(TransientImage(frames_lo[0].grid, stack[src, xs, ys], t0 + start))
    return FrameSequence(tuple(out), out_rate)
