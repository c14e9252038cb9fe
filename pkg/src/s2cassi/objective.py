"""Training objectives and the masked-pixel diagnostic probe.

Two-phase supervision: the encoding phase adds an L1 term tying the encode
head's output to the masked scene F' = F * M, teaching the trunk where the
aperture blocked light; the emphasis phase then reuses that term's residual
as a reciprocal weight on the reconstruction loss, so samples (or patches)
the encoder already nails get pushed harder on fidelity.

All losses are means over voxels, which keeps the published alpha/beta
magnitudes meaningful regardless of image size. Loss ops accept either graph
tensors or plain cubes; ground-truth operands are always treated as
constants of the matching dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .optics import CodedMask, HyperCube, apply_mask

PHASES = ("ME", "MA")
REDUCTIONS = ("global", "patchwise")


@dataclass
class LossConfig:
    """Knobs for the two-phase objective.

    alpha weights the encode-supervision term (1.5 while pretraining, 1.0
    once the emphasis term switches on); beta_ma scales the reciprocal
    weight; eps_den floors its denominator so a perfect encoder cannot blow
    the weight up to infinity. reduction picks between one global weight per
    sample and one weight per patch x patch x n_lambda block. detach_weight
    stops gradients from flowing into the weight's denominator (off by
    default: the weight is part of the differentiable expression).
    """

    alpha: float = 1.5
    beta_ma: float = 10.0
    eps_den: float = 1e-6
    reduction: str = "global"
    patch: int = 32
    phase: str = "ME"
    detach_weight: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"LossConfig: alpha must be >= 0, got {self.alpha}")
        if self.beta_ma < 0:
            raise ContractError(f"LossConfig: beta_ma must be >= 0, got {self.beta_ma}")
        if self.eps_den <= 0:
            raise ContractError(f"LossConfig: eps_den must be > 0, got {self.eps_den}")
        if self.reduction not in REDUCTIONS:
            raise ContractError(f"LossConfig: reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.phase not in PHASES:
            raise ContractError(f"LossConfig: phase must be one of {PHASES}, got {self.phase!r}")
        if self.patch < 1:
            raise ContractError(f"LossConfig: patch must be >= 1, got {self.patch}")


@dataclass
class LossBreakdown:
    """One loss evaluation, split into components.

    recon/me/ma are the plain float values of the three terms (ma is 0 in
    the encoding phase); total_t is the scalar graph node to call backward
    on. Residual maps are detached per-voxel absolute errors for reporting.
    """

    recon: float
    me: float
    ma: float
    total_t: Tensor
    me_residual: np.ndarray
    recon_residual: np.ndarray

    @property
    def total(self) -> float:
        return float(self.total_t.data)


def _as_tensor(x) -> Tensor:
    """Tensors pass through (their dtype rules); raw arrays become float32."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, HyperCube):
        return ad.tensor(x.data)
    return ad.tensor(np.asarray(x), dtype=np.float32)


def _const_like(t: Tensor, arr) -> Tensor:
    """Ground-truth operand as a non-grad constant in t's dtype."""
    if isinstance(arr, HyperCube):
        arr = arr.data
    return ad.tensor(np.asarray(arr), dtype=t.data.dtype)


def _as_cube(x) -> HyperCube:
    return x if isinstance(x, HyperCube) else HyperCube(np.asarray(x))


def _as_mask(x) -> CodedMask:
    return x if isinstance(x, CodedMask) else CodedMask(np.asarray(x))


def recon_loss(pred, gt) -> Tensor:
    """Mean absolute error over all voxels, as a rank-0 graph node."""
    p = _as_tensor(pred)
    g = _const_like(p, gt)
    if p.data.shape != g.data.shape:
        raise DimensionError(f"recon_loss: pred {p.data.shape} vs gt {g.data.shape}")
    return ad.mean_all(ad.abs_(ad.sub(p, g)))


def _residual_maps(encoded_pred, cube, mask, pred):
    """Per-voxel |f_h - F'| and |F_hat - F| maps with shape checks."""
    enc = _as_tensor(encoded_pred)
    prd = _as_tensor(pred)
    cube = _as_cube(cube)
    fprime = apply_mask(cube, _as_mask(mask))
    if enc.data.shape != fprime.data.shape:
        raise DimensionError(
            f"me_loss: encoded {enc.data.shape} vs masked scene {fprime.data.shape}")
    if prd.data.shape != cube.data.shape:
        raise DimensionError(f"me_loss: pred {prd.data.shape} vs scene {cube.data.shape}")
    me_map = ad.abs_(ad.sub(enc, _const_like(enc, fprime)))
    rec_map = ad.abs_(ad.sub(prd, _const_like(prd, cube)))
    return me_map, rec_map


def me_loss(encoded_pred, cube, mask, pred, cfg: LossConfig) -> LossBreakdown:
    """Encoding-phase objective: alpha * mean|f_h - F'| + mean|F_hat - F|."""
    me_map, rec_map = _residual_maps(encoded_pred, cube, mask, pred)
    me_t = ad.mean_all(me_map)
    rec_t = ad.mean_all(rec_map)
    total = ad.add(ad.scale(me_t, cfg.alpha), rec_t)
    return LossBreakdown(recon=float(rec_t.data), me=float(me_t.data), ma=0.0,
                         total_t=total,
                         me_residual=me_map.data.copy(),
                         recon_residual=rec_map.data.copy())


def _patch_means(map_t: Tensor, p: int) -> Tensor:
    """Mean within each non-overlapping p x p x C block, row-major order.

    Trailing blocks are smaller when a side is not divisible by p; their
    mean runs over the cells that exist.
    """
    h, w, c = map_t.shape
    if h % p == 0 and w % p == 0:
        t = ad.reshape(map_t, (h // p, p, w // p, p, c))
        t = ad.permute(t, (0, 2, 1, 3, 4))
        return ad.mean_last(ad.reshape(t, ((h // p) * (w // p), p * p * c)))
    parts = []
    for y0 in range(0, h, p):
        for x0 in range(0, w, p):
            blk = ad.crop2d(map_t, y0, x0, min(p, h - y0), min(p, w - x0))
            parts.append(ad.reshape(ad.mean_all(blk), (1,)))
    return ad.concat_last(parts)


def _weight_from(den: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.detach_weight:
        den = ad.tensor(den.data.copy(), dtype=den.data.dtype)
    return ad.scale(ad.reciprocal(ad.maximum_const(den, cfg.eps_den)), cfg.beta_ma)


def ma_weight(encoded_pred, cube, mask, cfg: LossConfig) -> Tensor:
    """Reciprocal emphasis weight beta / max(ME residual, eps).

    Global reduction yields a rank-0 node; patchwise yields one weight per
    block, ordered row-major over the patch grid.
    """
    enc = _as_tensor(encoded_pred)
    fprime = apply_mask(_as_cube(cube), _as_mask(mask))
    if enc.data.shape != fprime.data.shape:
        raise DimensionError(
            f"ma_weight: encoded {enc.data.shape} vs masked scene {fprime.data.shape}")
    me_map = ad.abs_(ad.sub(enc, _const_like(enc, fprime)))
    if cfg.reduction == "global":
        return _weight_from(ad.mean_all(me_map), cfg)
    return _weight_from(_patch_means(me_map, cfg.patch), cfg)


def ma_loss(encoded_pred, cube, mask, pred, cfg: LossConfig) -> LossBreakdown:
    """Emphasis-phase objective: the encoding objective plus the weighted
    reconstruction term (one weight globally, or summed over patches)."""
    me_map, rec_map = _residual_maps(encoded_pred, cube, mask, pred)
    me_t = ad.mean_all(me_map)
    rec_t = ad.mean_all(rec_map)
    base = ad.add(ad.scale(me_t, cfg.alpha), rec_t)
    if cfg.reduction == "global":
        w = _weight_from(me_t, cfg)
        ma_t = ad.mul(w, rec_t)
    else:
        w = _weight_from(_patch_means(me_map, cfg.patch), cfg)
        ma_t = ad.sum_all(ad.mul(w, _patch_means(rec_map, cfg.patch)))
    total = ad.add(base, ma_t)
    return LossBreakdown(recon=float(rec_t.data), me=float(me_t.data),
                         ma=float(ma_t.data), total_t=total,
                         me_residual=me_map.data.copy(),
                         recon_residual=rec_map.data.copy())


def objective(encoded_pred, cube, mask, pred, cfg: LossConfig) -> LossBreakdown:
    """Phase dispatch: the emphasis term exists only in phase MA, so in
    phase ME it contributes exactly zero to values and gradients."""
    if cfg.phase == "MA":
        return ma_loss(encoded_pred, cube, mask, pred, cfg)
    return me_loss(encoded_pred, cube, mask, pred, cfg)


@dataclass
class ProbeReport:
    """Residual statistics split by aperture state.

    masked_mae averages |pred - gt| on pixels the mask blocked
    (value < threshold), unmasked_mae on the rest; ratio = masked/unmasked,
    None when either side is empty or the unmasked residual is zero (the
    degenerate flag says so). difficulty holds the per-channel |pred - gt|
    map for visual inspection.
    """

    masked_mae: float
    unmasked_mae: float
    ratio: float | None
    masked_count: int
    unmasked_count: int
    degenerate: bool
    difficulty: np.ndarray


def corollary_probe(pred, gt, mask, threshold: float = 0.5) -> ProbeReport:
    """Compare reconstruction error on blocked vs open mask pixels."""
    p = np.asarray(pred.data if isinstance(pred, (HyperCube, Tensor)) else pred, dtype=np.float64)
    g = np.asarray(gt.data if isinstance(gt, (HyperCube, Tensor)) else gt, dtype=np.float64)
    m = _as_mask(mask).data
    if p.shape != g.shape:
        raise DimensionError(f"corollary_probe: pred {p.shape} vs gt {g.shape}")
    if p.shape[:2] != m.shape:
        raise DimensionError(f"corollary_probe: cube {p.shape} vs mask {m.shape}")
    diff = np.abs(p - g)
    blocked = m < threshold
    n_blk = int(blocked.sum())
    n_open = int(m.size - n_blk)
    masked_mae = float(diff[blocked].mean()) if n_blk else 0.0
    unmasked_mae = float(diff[~blocked].mean()) if n_open else 0.0
    degenerate = n_blk == 0 or n_open == 0
    ratio = None
    if not degenerate and unmasked_mae > 0.0:
        ratio = masked_mae / unmasked_mae
    return ProbeReport(masked_mae=masked_mae, unmasked_mae=unmasked_mae,
                       ratio=ratio, masked_count=n_blk, unmasked_count=n_open,
                       degenerate=degenerate, difficulty=diff.astype(np.float32))
