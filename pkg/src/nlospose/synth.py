"""Pseudo-transient synthesis from depth maps, plus the value-level augmentations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from .lct import Psf, forward_project
from .volumes import AxisKind, DepthMap, FrameSequence, ReflectanceVolume, TransientImage

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class AugmentConfig:
    albedo: float = 100.0
    fwhm_ps: float = 70.0
    shift_levels: tuple[float, ...] = field(default=(-0.5, -0.25, 0.0, 0.25, 0.5))
    poisson: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.albedo > 0:
            raise ValueError(f"albedo must be > 0 (got {self.albedo})")
        if not self.fwhm_ps >= 0:
            raise ValueError(f"fwhm_ps must be >= 0 (got {self.fwhm_ps})")
        levels = tuple(float(s) for s in self.shift_levels)
        if not levels:
            raise ValueError("shift_levels must not be empty")
        object.__setattr__(self, "shift_levels", levels)
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFF_FFFF_FFFF_FFFF)


def depth_to_reflectance(depth: DepthMap, albedo: float = 100.0) -> ReflectanceVolume:
    """Binary occupancy volume: ``albedo`` at the depth bin nearest each pixel's depth."""
    g = depth.grid
    d = depth.data.astype(np.float64)
    valid = (d > 0) & (d <= g.z_max)
    k = np.clip(np.rint(d / g.dz).astype(np.int64) - 1, 0, g.nz - 1)
    vol = np.zeros(g.volume_shape, dtype=np.float32)
    ix, iy = np.nonzero(valid)
    vol[ix, iy, k[ix, iy]] = albedo
    return ReflectanceVolume(g, vol, AxisKind.Z)


def apply_poisson(tau: TransientImage, seed: int) -> TransientImage:
    rng = np.random.default_rng(seed)
    counts = rng.poisson(tau.data.astype(np.float64))
    return TransientImage(tau.grid, counts, tau.t_start)


def blur_sigma_bins(fwhm_ps: float, bin_width_s: float) -> float:
    return fwhm_ps * 1e-12 * FWHM_TO_SIGMA / bin_width_s


def gaussian_kernel(sigma_bins: float) -> np.ndarray:
    """Normalized Gaussian truncated at +-4 sigma."""
    radius = max(int(math.ceil(4.0 * sigma_bins)), 0)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_bins) ** 2)
    return k / k.sum()


def apply_temporal_blur(tau: TransientImage, fwhm_ps: float) -> TransientImage:
    """Convolve every transient with a Gaussian of the given FWHM (picoseconds)."""
    if fwhm_ps < 0:
        raise ValueError(f"fwhm_ps must be >= 0 (got {fwhm_ps})")
    if fwhm_ps == 0:
        return tau
    kernel = gaussian_kernel(blur_sigma_bins(fwhm_ps, tau.grid.bin_width_s))
    out = convolve1d(tau.data.astype(np.float64), kernel, axis=2, mode="constant", cval=0.0)
    return TransientImage(tau.grid, np.maximum(out, 0.0), tau.t_start)


def shift_depth(depth: DepthMap, delta_m: float) -> DepthMap:
    """Bias every occupied pixel by ``delta_m``; pixels pushed to the wall or behind it become empty."""
    g = depth.grid
    d = depth.data.astype(np.float64)
    shifted = np.where(d > 0, d + delta_m, 0.0)
    shifted = np.minimum(shifted, g.z_max)
    shifted[shifted <= 0] = 0.0
    return DepthMap(g, shifted)


def synthesize_transient(depth: DepthMap, psf: Psf, cfg: AugmentConfig, *, seed: int | None = None,
                         t_start: float = 0.0) -> TransientImage:
    """Forward-render a depth map, then blur, then add Poisson noise (in that order)."""
    rho = depth_to_reflectance(depth, cfg.albedo)
    tau = forward_project(rho, psf, t_start=t_start)
    if cfg.fwhm_ps > 0:
        tau = apply_temporal_blur(tau, cfg.fwhm_ps)
    if cfg.poisson:
        tau = apply_poisson(tau, cfg.seed if seed is None else seed)
    return tau


def frame_seed(base: int, level: int, frame: int) -> int:
    """Independent per-frame seed, stable across runs and processing order."""
    return int(np.random.SeedSequence([base, level, frame]).generate_state(1, dtype=np.uint64)[0])


def augment_dataset(depth_seq: list[DepthMap], psf: Psf, cfg: AugmentConfig, *, rate: float = 30.0,
                    executor=None) -> list[FrameSequence]:
    """Synthesize one frame sequence per depth-shift level.

    ``executor`` may be any ``concurrent.futures`` executor; frames are
    independent, so the result does not depend on scheduling.
    """
    if not depth_seq:
        raise ValueError("depth sequence is empty")
    out = []
    for level, delta in enumerate(cfg.shift_levels):
        def render(i, level=level, delta=delta):
            return synthesize_transient(shift_depth(depth_seq[i], delta), psf, cfg,
                                        seed=frame_seed(cfg.seed, level, i), t_start=i / rate)

        idx = range(len(depth_seq))
        frames = list(executor.map(render, idx)) if executor is not None else [render(i) for i in idx]
        out.append(FrameSequence(tuple(frames), rate))
    return out
