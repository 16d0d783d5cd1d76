"""
Scan geometry, volume containers and the NLVT binary format.

Index order for every 3D payload is (x, y, t) or (x, y, z): x outermost,
the time/depth axis innermost. Containers hold float32 data, the same
precision as the on-disk payload, so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Raised when a file is not a valid NLVT volume or depth image."""


class PayloadLengthError(FormatError):
    """Raised when an NLVT payload does not match the header dimensions."""


@dataclass(frozen=True, kw_only=True)
class GridSpec:
    """Discretization of one confocal scan.

    Wall samples are spaced ``wall_width_m / nx`` apart. Time bin ``k`` sits
    at ``k * bin_width_s``; depth bin ``k`` at ``(k + 1) * dz`` so the wall
    plane is never part of the volume. The light-cone axes use uniform samples
    ``m * du`` and ``j * dv`` starting at zero.
    """

    wall_width_m: float
    bin_width_s: float
    nx: int = 32
    ny: int = 32
    nt: int = 64
    nz: int = 64
    c: float = field(default=SPEED_OF_LIGHT, init=False)

    def __post_init__(self):
        for name in ("nx", "ny", "nt", "nz"):
            value = getattr(self, name)
            if int(value) != value or value < 2:
                raise ValueError(f"GridSpec.{name} must be an integer >= 2 (got {value!r})")
            object.__setattr__(self, name, int(value))
        for name in ("wall_width_m", "bin_width_s"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"GridSpec.{name} must be finite and > 0 (got {value!r})")
            object.__setattr__(self, name, float(value))

    @property
    def wall_spacing(self) -> float:
        return self.wall_width_m / self.nx

    @property
    def z_max(self) -> float:
        return self.c * self.nt * self.bin_width_s / 2.0

    @property
    def dz(self) -> float:
        return self.z_max / self.nz

    @property
    def v_max(self) -> float:
        return self.z_max**2

    @property
    def u_max(self) -> float:
        return self.z_max**2

    @property
    def du(self) -> float:
        return self.u_max / self.nz

    @property
    def dv(self) -> float:
        return self.v_max / self.nt

    @property
    def transient_shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nt)

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    def t_centers(self) -> np.ndarray:
        return np.arange(self.nt) * self.bin_width_s

    def z_centers(self) -> np.ndarray:
        return (np.arange(self.nz) + 1.0) * self.dz

    def u_samples(self) -> np.ndarray:
        return np.arange(self.nz) * self.du

    def v_samples(self) -> np.ndarray:
        return np.arange(self.nt) * self.dv

    def with_dims(self, **dims) -> "GridSpec":
        params = dict(
            wall_width_m=self.wall_width_m,
            bin_width_s=self.bin_width_s,
            nx=self.nx,
            ny=self.ny,
            nt=self.nt,
            nz=self.nz,
        )
        params.update(dims)
        return GridSpec(**params)


class AxisKind(enum.Enum):
    Z = "z"  # uniform in depth
    U = "u"  # uniform in squared depth


def _frozen_float32(data, name: str) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TransientImage:
    grid: GridSpec
    data: np.ndarray
    t_start: float = 0.0

    def __post_init__(self):
        arr = _frozen_float32(self.data, "transient")
        if arr.shape != self.grid.transient_shape:
            raise ValueError(f"transient shape {arr.shape} != grid {self.grid.transient_shape}")
        if np.any(arr < 0):
            raise ValueError("transient photon counts must be >= 0")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "t_start", float(self.t_start))


@dataclass(frozen=True, eq=False)
class ReflectanceVolume:
    grid: GridSpec
    data: np.ndarray
    axis: AxisKind = AxisKind.Z

    def __post_init__(self):
        arr = _frozen_float32(self.data, "reflectance volume")
        if arr.shape != self.grid.volume_shape:
            raise ValueError(f"volume shape {arr.shape} != grid {self.grid.volume_shape}")
        if np.any(arr < 0):
            raise ValueError("reflectance must be >= 0")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "axis", AxisKind(self.axis))


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-wall-pixel distance to the hidden surface; 0 marks an empty pixel."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = _frozen_float32(self.data, "depth map")
        if arr.shape != (self.grid.nx, self.grid.ny):
            raise ValueError(f"depth shape {arr.shape} != ({self.grid.nx}, {self.grid.ny})")
        if np.any(arr < 0) or np.any(arr > np.float32(self.grid.z_max)):
            raise ValueError("depth entries must lie in {0} or (0, z_max]")
        object.__setattr__(self, "data", arr)

    @property
    def mask(self) -> np.ndarray:
        return self.data > 0


@dataclass(frozen=True, eq=False)
class HeatMap2D:
    data: np.ndarray
    axis: str = "z"

    def __post_init__(self):
        arr = _frozen_float32(self.data, "heat map")
        if arr.ndim != 2:
            raise ValueError(f"heat map must be 2D (got shape {arr.shape})")
        if np.any(arr < 0):
            raise ValueError("heat map entries must be >= 0")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple[TransientImage, ...]
    rate: float

    def __post_init__(self):
        frames = tuple(self.frames)
        if self.rate <= 0:
            raise ValueError(f"frame rate must be > 0 (got {self.rate})")
        starts = np.array([f.t_start for f in frames])
        if len(frames) > 1:
            gaps = np.diff(starts)
            if np.any(np.abs(gaps - 1.0 / self.rate) > 1e-9):
                raise ValueError(f"frame start times are not spaced 1/{self.rate} s apart")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, item):
        return self.frames[item]

    def __iter__(self):
        return iter(self.frames)


# ---------------------------------------------------------------------------
# NLVT format

MAGIC = b"NLVT"
VERSION = 1
_HEADER = struct.Struct("<4sBBH3I5d")
HEADER_SIZE = _HEADER.size


class Kind(enum.IntEnum):
    TRANSIENT = 0
    REFLECTANCE_Z = 1
    REFLECTANCE_U = 2
    HEATMAP = 3
    DEPTH = 4


Volume = Union[TransientImage, ReflectanceVolume, HeatMap2D, DepthMap]


def _describe(vol: Volume):
    """Return (kind, data3d, wall_width, bin_width, t_start, meters_per_unit)."""
    if isinstance(vol, TransientImage):
        g = vol.grid
        return Kind.TRANSIENT, vol.data, g.wall_width_m, g.bin_width_s, vol.t_start, 0.0
    if isinstance(vol, ReflectanceVolume):
        g = vol.grid
        kind = Kind.REFLECTANCE_Z if vol.axis is AxisKind.Z else Kind.REFLECTANCE_U
        return kind, vol.data, g.wall_width_m, g.bin_width_s, 0.0, 0.0
    if isinstance(vol, HeatMap2D):
        return Kind.HEATMAP, vol.data[:, :, None], 0.0, 0.0, 0.0, 0.0
    if isinstance(vol, DepthMap):
        g = vol.grid
        return Kind.DEPTH, vol.data[:, :, None], g.wall_width_m, g.bin_width_s, 0.0, 1.0
    raise TypeError(f"cannot serialize {type(vol).__name__}")


def encode_volume(vol: Volume) -> bytes:
    kind, data, wall, binw, t_start, mpu = _describe(vol)
    if not np.all(np.isfinite(data)):
        raise ValueError("refusing to write non-finite volume")
    header = _HEADER.pack(MAGIC, VERSION, int(kind), 0, *data.shape, wall, binw, t_start, mpu, 0.0)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes(order="C")


def write_volume(vol: Volume, path: PathLike) -> None:
    """Write a volume, heat map or depth map as an NLVT file."""
    payload = encode_volume(vol)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"failed to write NLVT file {os.fspath(path)!r}: {exc}") from exc


def _parse(raw: bytes, source: str):
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{source}: file shorter than the {HEADER_SIZE}-byte NLVT header")
    magic, version, kind, reserved, d0, d1, d2, wall, binw, t_start, mpu, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported NLVT version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise FormatError(f"{source}: unknown volume kind {kind}") from None
    if reserved != 0:
        raise FormatError(f"{source}: reserved header bytes are not zero")
    expected = d0 * d1 * d2 * 4
    got = len(raw) - HEADER_SIZE
    if got != expected:
        raise PayloadLengthError(
            f"{source}: payload is {got} bytes, header dims ({d0}, {d1}, {d2}) need {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(d0, d1, d2)
    return kind, data.astype(np.float32), wall, binw, t_start, mpu


def read_volume(path: PathLike, grid: GridSpec | None = None) -> Volume:
    """Read an NLVT file written by :func:`write_volume`.

    The header stores only the three payload dimensions, so the axis that is
    absent from a file (``nz`` for transients, ``nt`` for reflectance volumes)
    is taken equal to the one present unless ``grid`` is supplied. Depth maps
    carry no time axis at all and default to a 64-bin grid.
    """
    source = os.fspath(path)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read NLVT file {source!r}: {exc}") from exc
    kind, data, wall, binw, t_start, _ = _parse(raw, source)
    d0, d1, d2 = data.shape

    if kind is Kind.HEATMAP:
        return HeatMap2D(data[:, :, 0])

    if grid is None:
        if kind is Kind.DEPTH:
            grid = GridSpec(wall_width_m=wall, bin_width_s=binw, nx=d0, ny=d1)
        else:
            grid = GridSpec(wall_width_m=wall, bin_width_s=binw, nx=d0, ny=d1, nt=d2, nz=d2)

    if kind is Kind.TRANSIENT:
        return TransientImage(grid, data, t_start)
    if kind is Kind.DEPTH:
        return DepthMap(grid, data[:, :, 0])
    axis = AxisKind.Z if kind is Kind.REFLECTANCE_Z else AxisKind.U
    return ReflectanceVolume(grid, data, axis)


def read_depth_map(path: PathLike, grid: GridSpec, meters_per_unit: float = 1e-3) -> DepthMap:
    """Load a depth image and convert it to meters.

    Accepts a 16-bit single-channel PNG (raw sensor units scaled by
    ``meters_per_unit``) or an NLVT depth file, whose payload is already in
    meters. Values beyond the grid's range are clamped to ``z_max``.
    """
    if meters_per_unit <= 0:
        raise ValueError(f"meters_per_unit must be > 0 (got {meters_per_unit})")
    source = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(4)

    if head == MAGIC:
        vol = read_volume(path, grid=grid)
        if not isinstance(vol, DepthMap):
            raise FormatError(f"{source}: NLVT file does not hold a depth map")
        meters = vol.data.astype(np.float64)
    else:
        from PIL import Image

        try:
            img = Image.open(path)
            img.load()
        except Exception as exc:  # PIL raises several unrelated types
            raise FormatError(f"{source}: unreadable image ({exc})") from exc
        if img.mode not in ("I;16", "I;16L", "I;16B"):
            raise FormatError(f"{source}: expected 16-bit single-channel image, got mode {img.mode}")
        units = np.asarray(img, dtype=np.float64).T  # image rows are y
        meters = units * meters_per_unit

    if meters.shape != (grid.nx, grid.ny):
        raise FormatError(f"{source}: depth image is {meters.shape}, grid expects ({grid.nx}, {grid.ny})")
    z_max = np.float32(grid.z_max)
    out = np.minimum(meters.astype(np.float32), z_max)
    out[~(out > 0)] = 0.0
    return DepthMap(grid, out)


def write_depth_png(depth_units: np.ndarray, path: PathLike) -> None:
    """Save an (nx, ny) array of raw depth units as a 16-bit PNG."""
    from PIL import Image

    arr = np.asarray(depth_units)
    if arr.min() < 0 or arr.max() > 65535:
        raise ValueError("depth units must fit in 16 bits")
    Image.fromarray(np.ascontiguousarray(arr.T.astype(np.uint16))).save(path, format="PNG")


def frame_filename(index: int) -> str:
    return f"frame_{index:05d}.nlvt"
