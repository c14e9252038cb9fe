"""Deterministic dispersive snapshot camera model.

A scene cube is modulated by the coded aperture, sheared along the x axis by
d pixels per spectral channel (anchor channel 0, so shifts are non-negative),
and summed over channels onto the sensor, optionally with Gaussian read
noise. The network input is the sliding re-masked crop of that measurement.

Everything here is a pure function over value types; randomness always comes
from an explicit seed, expanded through a counter-based Philox generator, so
results are reproducible and safe to compute concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, DimensionError


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    """Counter-based generator for (seed, purpose, epoch, ...) tuples."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, tags)])))


@dataclass
class HyperCube:
    """Scene cube, h x w x n_lambda, float32. Ground truth lives in [0,1];
    reconstructions may transiently exceed and are clamped only for metrics."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"HyperCube: rank {self.data.ndim}, expected h x w x n_lambda")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def n_lambda(self) -> int:
        return self.data.shape[2]


@dataclass
class CodedMask:
    """Aperture pattern, h x w, values in [0,1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DimensionError(f"CodedMask: rank {self.data.ndim}, expected h x w")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ContractError("CodedMask: values must lie in [0,1]")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]


@dataclass
class Measurement:
    """Sensor image, h x w_ext where w_ext = w + d*(n_lambda - 1)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DimensionError(f"Measurement: rank {self.data.ndim}, expected h x w_ext")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w_ext(self) -> int:
        return self.data.shape[1]


@dataclass
class ShearRule:
    """Disperser geometry: channel n lands at column offset d*(n - anchor_index)."""

    d: int = 2
    anchor_index: int = 0

    def __post_init__(self):
        if self.d < 0:
            raise ContractError(f"ShearRule: d must be non-negative, got {self.d}")
        if self.anchor_index != 0:
            # only the zero anchor keeps every shift non-negative and the
            # width formula w_ext = w + d*(n_lambda-1) exact
            raise ContractError(f"ShearRule: anchor_index must be 0, got {self.anchor_index}")


def extended_width(w: int, n_lambda: int, rule: ShearRule) -> int:
    return w + rule.d * (n_lambda - 1)


def apply_mask(cube: HyperCube, mask: CodedMask) -> HyperCube:
    """Pixel-wise modulation, mask broadcast over channels."""
    if (cube.h, cube.w) != (mask.h, mask.w):
        raise DimensionError(
            f"apply_mask: cube {cube.data.shape} vs mask {mask.data.shape}")
    return HyperCube(cube.data * mask.data[:, :, None])


def shear(cube: HyperCube, rule: ShearRule) -> np.ndarray:
    """Place channel n at column offset d*n in an h x w_ext x n_lambda buffer."""
    h, w, n = cube.data.shape
    wx = extended_width(w, n, rule)
    out = np.zeros((h, wx, n), dtype=np.float32)
    for c in range(n):
        off = rule.d * c
        out[:, off:off + w, c] = cube.data[:, :, c]
    return out


def form_measurement(cube: HyperCube, mask: CodedMask, rule: ShearRule,
                     noise_sigma: float = 0.0, seed: int = 0) -> Measurement:
    """Mask, shear, sum over channels, then add seeded Gaussian read noise."""
    if noise_sigma < 0:
        raise ContractError(f"form_measurement: noise_sigma {noise_sigma} < 0")
    y = shear(apply_mask(cube, mask), rule).sum(axis=2, dtype=np.float32)
    if noise_sigma > 0:
        noise = rng_for(seed, 0xA0).normal(0.0, noise_sigma, size=y.shape)
        y = (y + noise).astype(np.float32)
    return Measurement(y)


def init_input(y: Measurement, mask: CodedMask, rule: ShearRule) -> HyperCube:
    """Sliding crop of the measurement, re-masked per channel (network input)."""
    h, w = mask.h, mask.w
    if y.h != h:
        raise DimensionError(f"init_input: measurement height {y.h} vs mask {h}")
    wx = y.w_ext
    if wx < w or (wx - w) % max(rule.d, 1) != 0:
        raise DimensionError(
            f"init_input: width {wx} inconsistent with mask width {w} and step {rule.d}")
    n = (wx - w) // rule.d + 1 if rule.d > 0 else 1
    out = np.empty((h, w, n), dtype=np.float32)
    for c in range(n):
        off = rule.d * c
        out[:, :, c] = y.data[:, off:off + w] * mask.data
    return HyperCube(out)


def make_mask(h: int, w: int, kind: str = "binary", density: float = 0.5,
              seed: int = 0, path: str | None = None) -> CodedMask:
    """Aperture generator: Bernoulli binary, uniform [0,1], or MSK1 file."""
    if kind == "binary":
        if not (0.0 < density <= 1.0):
            raise ContractError(f"make_mask: density {density} outside (0,1]")
        vals = (rng_for(seed, 0xB1).random((h, w)) < density).astype(np.float32)
        return CodedMask(vals)
    if kind == "uniform":
        return CodedMask(rng_for(seed, 0xB2).random((h, w)).astype(np.float32))
    if kind == "file":
        from . import fileio
        if path is None:
            raise ContractError("make_mask: kind 'file' requires a path")
        m = fileio.read_mask(path)
        if h > 0 and w > 0 and (m.h, m.w) != (h, w):
            raise DimensionError(f"make_mask: file mask {m.h}x{m.w}, expected {h}x{w}")
        return m
    raise ContractError(f"make_mask: unknown kind {kind!r}")


def make_synthetic_cube(h: int, w: int, n_lambda: int, n_blobs: int = 6,
                        seed: int = 0) -> HyperCube:
    """Desk-scale stand-in scene: spatial Gaussian blobs, each weighted by a
    smooth spectral response, summed and clipped to [0,1].

    Smooth per-blob spectra make neighboring channels nearly proportional, so
    adjacent channels correlate more strongly than distant ones.
    """
    if n_blobs < 1:
        raise ContractError(f"make_synthetic_cube: n_blobs {n_blobs} < 1")
    rng = rng_for(seed, 0xC3)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    cube = np.zeros((h, w, n_lambda), dtype=np.float32)
    lam = np.arange(n_lambda, dtype=np.float32)
    for _ in range(n_blobs):
        cy, cx = rng.random() * h, rng.random() * w
        sig = (0.08 + 0.25 * rng.random()) * max(h, w)
        amp = 0.4 + 0.6 * rng.random()
        spatial = amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sig * sig))
        center = rng.random() * max(n_lambda - 1, 1)
        width = (0.15 + 0.35 * rng.random()) * max(n_lambda, 2)
        spectrum = np.exp(-((lam - center) ** 2) / (2.0 * width * width)).astype(np.float32)
        cube += spatial[:, :, None] * spectrum[None, None, :]
    return HyperCube(np.clip(cube, 0.0, 1.0))
