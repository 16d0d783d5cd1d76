"""
Confocal NLOS image formation and light-cone-transform inversion.

With ``u = z**2`` and ``v = (t c / 2)**2`` the confocal transient becomes a
3D convolution of the depth-resampled albedo with a hypercone kernel::

    v**1.5 * tau(x', y', 2 sqrt(v) / c)
        = sum_{x, y, u} rho(x, y, sqrt(u)) / (2 sqrt(u)) * h(x' - x, y' - y, v - u)

The u- and v-axes share one sample spacing, so every operator here needs
``grid.nz == grid.nt``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft

from .volumes import (
    AxisKind,
    GridSpec,
    HeatMap2D,
    ReflectanceVolume,
    TransientImage,
    read_volume,
)

DEFAULT_ALPHA = 0.1


def _check_lct_grid(grid: GridSpec) -> None:
    if grid.nz != grid.nt:
        raise ValueError(f"light-cone operators need nz == nt (got nz={grid.nz}, nt={grid.nt})")


def _interp_last(data: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Linearly interpolate ``data`` along its last axis at fractional indices.

    Reads outside ``[0, n - 1]`` return 0.
    """
    n = data.shape[-1]
    pos = np.asarray(pos, dtype=np.float64)
    inside = (pos >= 0) & (pos <= n - 1)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n - 1)
    hi = np.clip(lo + 1, 0, n - 1)
    frac = np.where(inside, pos - lo, 0.0)
    out = data[..., lo] * (1.0 - frac) + data[..., hi] * frac
    return out * inside


@dataclass(frozen=True, eq=False)
class Psf:
    """Zero-padded hypercone kernel, shape ``(2 nx, 2 ny, 2 nt)``.

    Lateral offsets are stored in circular (FFT) order: index ``i`` holds
    offset ``i`` for ``i < nx`` and ``i - 2 nx`` otherwise.
    """

    grid: GridSpec
    data: np.ndarray

    @cached_property
    def spectrum(self) -> np.ndarray:
        """3D Fourier transform of the kernel, computed once per PSF."""
        return scipy.fft.fftn(self.data.astype(np.float64), workers=-1)


def _circular_offsets(n: int) -> np.ndarray:
    idx = np.arange(2 * n)
    return np.where(idx < n, idx, idx - 2 * n)


def build_psf(grid: GridSpec) -> Psf:
    """Discretize the light-cone kernel on the padded grid.

    Every lateral offset column receives unit mass at the ``w = v - u`` bin
    nearest to ``dx**2 + dy**2``. Bins past ``nt - 1`` are left empty: they
    can never reach the cropped output and would otherwise wrap around in the
    circular convolution.
    """
    _check_lct_grid(grid)
    nx, ny, nt = grid.nx, grid.ny, grid.nt
    dx = _circular_offsets(nx) * grid.wall_spacing
    dy = _circular_offsets(ny) * grid.wall_spacing
    r2 = dx[:, None] ** 2 + dy[None, :] ** 2
    w_bin = np.rint(r2 / grid.dv).astype(np.int64)

    data = np.zeros((2 * nx, 2 * ny, 2 * nt), dtype=np.float64)
    ix, iy = np.nonzero(w_bin < nt)
    data[ix, iy, w_bin[ix, iy]] = 1.0
    data.setflags(write=False)
    return Psf(grid, data)


def resample_time(tau: TransientImage) -> np.ndarray:
    """Map a transient onto the uniform v-axis, scaled by ``v**1.5``.

    Returns the raw ``(nx, ny, nt)`` float64 array; the v-domain is an
    intermediate, not a physical volume.
    """
    g = tau.grid
    _check_lct_grid(g)
    v = g.v_samples()
    t_index = 2.0 * np.sqrt(v) / g.c / g.bin_width_s
    out = _interp_last(tau.data.astype(np.float64), t_index) * v**1.5
    out[..., 0] = 0.0
    return out


def resample_time_inverse(tilde_tau: np.ndarray, grid: GridSpec, t_start: float = 0.0,
                          clamp: bool = True) -> TransientImage | np.ndarray:
    """Bring v-domain data back to uniform time bins, dividing by ``v**1.5``.

    The ``t = 0`` bin is zero. With ``clamp=False`` the unclamped float64 array
    is returned instead of a :class:`TransientImage`.
    """
    _check_lct_grid(grid)
    t = grid.t_centers()
    v = (t * grid.c / 2.0) ** 2
    out = _interp_last(np.asarray(tilde_tau, dtype=np.float64), v / grid.dv)
    scale = np.zeros_like(v)
    scale[1:] = v[1:] ** -1.5
    out = out * scale
    if not clamp:
        return out
    return TransientImage(grid, np.maximum(out, 0.0), t_start)


def resample_depth(rho: ReflectanceVolume) -> ReflectanceVolume:
    """Resample a depth-uniform volume to uniform ``u = z**2``, attenuated by ``1 / (2 sqrt(u))``."""
    if rho.axis is not AxisKind.Z:
        raise ValueError("resample_depth expects a Z-uniform volume")
    g = rho.grid
    _check_lct_grid(g)
    return ReflectanceVolume(g, _depth_to_u(rho.data, g), AxisKind.U)


def _depth_to_u(data: np.ndarray, g: GridSpec) -> np.ndarray:
    u = g.u_samples()
    z = np.sqrt(u)
    z_index = z / g.dz - 1.0
    out = _interp_last(np.asarray(data, dtype=np.float64), z_index)
    scale = np.zeros_like(u)
    scale[1:] = 0.5 / z[1:]
    return out * scale


def _u_to_depth(data: np.ndarray, g: GridSpec) -> np.ndarray:
    z = g.z_centers()
    return _interp_last(np.asarray(data, dtype=np.float64), z**2 / g.du) * (2.0 * z)


def resample_depth_inverse(rho_u: ReflectanceVolume) -> ReflectanceVolume:
    """Undo :func:`resample_depth`: scale by ``2 sqrt(u)`` and read back at ``u = z**2``."""
    if rho_u.axis is not AxisKind.U:
        raise ValueError("resample_depth_inverse expects a U-uniform volume")
    g = rho_u.grid
    _check_lct_grid(g)
    return ReflectanceVolume(g, _u_to_depth(rho_u.data, g), AxisKind.Z)


def _pad(data: np.ndarray, grid: GridSpec) -> np.ndarray:
    padded = np.zeros((2 * grid.nx, 2 * grid.ny, 2 * grid.nt), dtype=np.float64)
    padded[: grid.nx, : grid.ny, : data.shape[2]] = data
    return padded


def _crop(data: np.ndarray, grid: GridSpec) -> np.ndarray:
    return data[: grid.nx, : grid.ny, : grid.nt]


def _check_psf(psf: Psf, grid: GridSpec) -> None:
    if psf.grid != grid:
        raise ValueError("PSF was built for a different grid")


def forward_project(rho: ReflectanceVolume, psf: Psf, *, t_start: float = 0.0,
                    clamp: bool = True) -> TransientImage | np.ndarray:
    """Render the confocal transient of a depth-uniform albedo volume.

    ``clamp=False`` skips the final non-negativity clamp and returns the raw
    float64 array (used to check linearity).
    """
    if rho.axis is not AxisKind.Z:
        raise ValueError("forward_project expects a Z-uniform volume")
    g = rho.grid
    _check_lct_grid(g)
    _check_psf(psf, g)
    rho_u = _depth_to_u(rho.data, g)
    spec = scipy.fft.fftn(_pad(rho_u, g), workers=-1)
    tilde_tau = _crop(scipy.fft.ifftn(spec * psf.spectrum, workers=-1).real, g)
    return resample_time_inverse(tilde_tau, g, t_start, clamp=clamp)


def inverse_filter(psf: Psf, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Wiener inverse of the kernel spectrum, ``H* / (|H|**2 + 1/alpha)``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0 (got {alpha})")
    H = psf.spectrum
    return np.conj(H) / (np.abs(H) ** 2 + 1.0 / alpha)


def _broadcast_correction(correction, shape) -> np.ndarray:
    corr = np.asarray(correction)
    if not np.all(np.isfinite(corr)):
        raise ValueError("correction volume has non-finite entries")
    try:
        np.broadcast_shapes(corr.shape, shape)
    except ValueError:
        raise ValueError(f"correction shape {corr.shape} does not broadcast to filter shape {shape}") from None
    if np.broadcast_shapes(corr.shape, shape) != tuple(shape):
        raise ValueError(f"correction shape {corr.shape} does not broadcast to filter shape {shape}")
    return corr


def wiener_reconstruct(tau: TransientImage, psf: Psf, alpha: float = DEFAULT_ALPHA,
                       correction: np.ndarray | None = None) -> ReflectanceVolume:
    """Recover the albedo volume from a transient with a Wiener-filtered LCT.

    ``correction`` is added to the inverse filter in the frequency domain
    before it is applied; it must broadcast to ``(2 nx, 2 ny, 2 nt)``.
    """
    g = tau.grid
    _check_lct_grid(g)
    _check_psf(psf, g)
    filt = inverse_filter(psf, alpha)
    if correction is not None:
        filt = filt + _broadcast_correction(correction, filt.shape)
    spec = scipy.fft.fftn(_pad(resample_time(tau), g), workers=-1)
    rho_u = _crop(scipy.fft.ifftn(spec * filt, workers=-1).real, g)
    rho = _u_to_depth(rho_u, g)
    return ReflectanceVolume(g, np.maximum(rho, 0.0), AxisKind.Z)


def load_correction(path, grid: GridSpec) -> np.ndarray:
    """Read a correction volume stored as an NLVT reflectance-u file."""
    vol = read_volume(path, grid=None)
    if not isinstance(vol, ReflectanceVolume) or vol.axis is not AxisKind.U:
        raise ValueError(f"{path}: correction must be an NLVT reflectance-u volume")
    shape = (2 * grid.nx, 2 * grid.ny, 2 * grid.nt)
    return _broadcast_correction(vol.data.astype(np.float64), shape)


def depth_max_project(rho_star: ReflectanceVolume, axis: str = "z") -> HeatMap2D:
    """Collapse a reconstruction to a 2D heat map by max pooling over one axis."""
    if rho_star.axis is not AxisKind.Z:
        raise ValueError("depth_max_project expects a Z-uniform volume")
    axes = {"z": 2, "y": 1}
    if axis not in axes:
        raise ValueError(f"axis must be 'z' or 'y' (got {axis!r})")
    return HeatMap2D(rho_star.data.max(axis=axes[axis]), axis=axis)
