"""Confocal NLOS transient toolkit: light-cone forward model and Wiener inversion,
pseudo-transient synthesis, raster-scan resampling, and pose rewards/metrics."""

__version__ = "0.1.0"
