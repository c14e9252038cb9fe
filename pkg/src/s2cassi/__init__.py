"""Snapshot spectral imaging: dispersive-camera simulation and learned
reconstruction with windowed spatial/spectral attention, built on a small
self-contained reverse-mode autodiff core."""

__version__ = "0.1.0"
