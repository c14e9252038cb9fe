"""Optimization loop and evaluation metrics.

Training runs two phases over a staircase learning rate: the encoding phase
supervises the encode head against the masked scene, then the emphasis phase
reweights reconstruction error by the (reciprocal) encoding residual. Every
stochastic choice (shuffle order, crop offsets, read noise) is drawn from a
generator derived from the master seed plus purpose tags, so a rerun with
the same seed is bit-identical.

Gradients accumulate on the parameter tensors; one Adam step is applied per
batch with the losses scaled by 1/batch so the update matches the mean-loss
gradient exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .network import ModelParams, NetworkConfig, encode_head, forward_tensors, init_params
from .objective import LossConfig, corollary_probe, objective, recon_loss
from .optics import (CodedMask, HyperCube, ShearRule, form_measurement,
                     init_input, rng_for)

# rng purpose tags (master seed, tag, epoch, scene)
TAG_SHUFFLE = 0xE5
TAG_NOISE = 0xE6
TAG_CROP = 0xE7

MODES = ("two_phase", "recon_only")


class _NamedSubset:
    def __init__(self, named):
        self._named = list(named)

    def items(self):
        return list(self._named)


@dataclass
class OptimizerState:
    """Adam moments plus hyperparameters. clip_norm 0 disables clipping."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 4e-4
    clip_norm: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError(f"OptimizerState: betas must lie in [0,1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ContractError(f"OptimizerState: eps must be > 0, got {self.eps}")
        if self.step < 0:
            raise ContractError(f"OptimizerState: step must be >= 0, got {self.step}")


@dataclass
class Schedule:
    total_epochs: int = 300
    phase_switch: int = 150
    lr_half_every: int = 50
    batch_size: int = 4

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ContractError(f"Schedule: total_epochs must be >= 1, got {self.total_epochs}")
        if not (0 < self.phase_switch < self.total_epochs):
            raise ContractError(
                f"Schedule: phase_switch must lie in (0, total_epochs), got {self.phase_switch}")
        if self.lr_half_every < 1:
            raise ContractError(f"Schedule: lr_half_every must be >= 1, got {self.lr_half_every}")
        if self.batch_size < 1:
            raise ContractError(f"Schedule: batch_size must be >= 1, got {self.batch_size}")


def adam_step(params, state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    params is anything with .items() yielding (name, Tensor); every tensor
    must carry a gradient. Moment buffers are allocated lazily per name.
    """
    named = list(params.items())
    for name, t in named:
        if t.grad is None:
            raise ContractError(f"adam_step: missing gradient for {name!r}")
    if state.clip_norm > 0:
        sq = 0.0
        for _, t in named:
            g = t.grad.astype(np.float64, copy=False)
            sq += float((g * g).sum())
        norm = math.sqrt(sq)
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
            for _, t in named:
                t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in named:
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / c1
        vhat = v / c2
        t.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(t.data.dtype)


def lr_at_epoch(e: int, sched: Schedule, base_lr: float = 4e-4) -> float:
    """Staircase decay: base halved at every lr_half_every epoch boundary."""
    if not (0 <= e < sched.total_epochs):
        raise ContractError(f"lr_at_epoch: epoch {e} outside [0, {sched.total_epochs})")
    return base_lr * 0.5 ** (e // sched.lr_half_every)


@dataclass
class EpochRecord:
    """One training epoch's averaged diagnostics."""

    epoch: int
    phase: str
    lr: float
    alpha: float
    recon: float
    me: float
    ma: float
    total: float
    masked_mae: float
    unmasked_mae: float
    eval: Optional["EvalResult"] = None


@dataclass
class EvalResult:
    """Per-scene metrics plus their means. psnr entries may be math.inf on
    an exact match; the parallel flag list marks those scenes."""

    psnr: list
    ssim: list
    masked_mae: list
    unmasked_mae: list
    psnr_infinite: list
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    mean_masked_mae: float = 0.0
    mean_unmasked_mae: float = 0.0

    def __post_init__(self):
        if self.psnr:
            self.mean_psnr = float(np.mean(self.psnr))
            self.mean_ssim = float(np.mean(self.ssim))
            self.mean_masked_mae = float(np.mean(self.masked_mae))
            self.mean_unmasked_mae = float(np.mean(self.unmasked_mae))


def psnr(pred, gt, peak: float = 1.0, per_channel: bool = False) -> float:
    """10*log10(peak^2 / MSE) in dB, prediction clamped to [0, peak].

    Whole-cube MSE by default; per_channel averages the channel PSNRs. An
    exact match returns math.inf (callers flag it).
    """
    p = np.asarray(pred.data if isinstance(pred, HyperCube) else pred, dtype=np.float64)
    g = np.asarray(gt.data if isinstance(gt, HyperCube) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"psnr: pred {p.shape} vs gt {g.shape}")
    p = np.clip(p, 0.0, peak)

    def one(pc, gc):
        mse = float(((pc - gc) ** 2).mean())
        if mse == 0.0:
            return math.inf
        return 10.0 * math.log10(peak * peak / mse)

    if not per_channel:
        return one(p, g)
    vals = [one(p[..., c], g[..., c]) for c in range(p.shape[-1])]
    return float(np.mean(vals))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred, gt, window: int = 11, sigma: float = 1.5) -> float:
    """Single-scale structural similarity at unit peak, channel-averaged.

    11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2, valid-mode
    sliding windows. Inputs are used as given (evaluate on clamped
    predictions for the standard metric).
    """
    p = np.asarray(pred.data if isinstance(pred, HyperCube) else pred, dtype=np.float64)
    g = np.asarray(gt.data if isinstance(gt, HyperCube) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"ssim: pred {p.shape} vs gt {g.shape}")
    if p.ndim == 2:
        p = p[:, :, None]
        g = g[:, :, None]
    h, w = p.shape[:2]
    if h < window or w < window:
        raise DimensionError(f"ssim: image {h}x{w} smaller than {window}x{window} window")
    kern = _gaussian_kernel(window, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def wmean(x):
        sw = np.lib.stride_tricks.sliding_window_view(x, (window, window))
        return np.einsum("ijkl,kl->ij", sw, kern, optimize=True)

    vals = []
    for c in range(p.shape[-1]):
        x, y = p[:, :, c], g[:, :, c]
        mx, my = wmean(x), wmean(y)
        mxx, myy, mxy = wmean(x * x), wmean(y * y), wmean(x * y)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


def _int_seed(seed: int, *tags: int) -> int:
    return int(rng_for(seed, *tags).integers(1 << 31))


def _crop_pair(cube: HyperCube, mask: CodedMask, size: int,
               rng: np.random.Generator):
    """Joint random crop; the window clamps to each scene dimension."""
    if size <= 0:
        return cube, mask
    sh, sw = min(size, cube.h), min(size, cube.w)
    if (sh, sw) == (cube.h, cube.w):
        return cube, mask
    top = int(rng.integers(0, cube.h - sh + 1))
    left = int(rng.integers(0, cube.w - sw + 1))
    return (HyperCube(cube.data[top:top + sh, left:left + sw]),
            CodedMask(mask.data[top:top + sh, left:left + sw]))


def _sample_loss(cube: HyperCube, mask: CodedMask, params: ModelParams,
                 net_cfg: NetworkConfig, rule: ShearRule, mode: str,
                 loss_cfg: LossConfig, noise_sigma: float, noise_seed: int):
    """Build one sample's loss graph; returns (loss tensor, components)."""
    y = form_measurement(cube, mask, rule, noise_sigma, seed=noise_seed)
    y_prime = init_input(y, mask, rule)
    res = forward_tensors(ad.tensor(y_prime.data), params, net_cfg)
    if mode == "recon_only":
        loss_t = recon_loss(res.recon, cube)
        rec = float(loss_t.data)
        parts = (rec, 0.0, 0.0, rec)
    else:
        enc = encode_head(res.z_kme, params, net_cfg)
        br = objective(enc, cube, mask, res.recon, loss_cfg)
        loss_t = br.total_t
        parts = (br.recon, br.me, br.ma, br.total)
    probe = corollary_probe(res.recon.data, cube.data, mask)
    return loss_t, parts, probe


def fit(dataset, mask: CodedMask, net_cfg: NetworkConfig, sched: Schedule,
        seed: int, opt: OptimizerState | None = None,
        rule: ShearRule | None = None, mode: str = "two_phase",
        alpha_pre: float = 1.5, alpha_main: float = 1.0, beta_ma: float = 10.0,
        eps_den: float = 1e-6, reduction: str = "global", patch: int = 32,
        detach_weight: bool = False, crop: int = 0, noise_sigma: float = 0.0,
        params: ModelParams | None = None,
        eval_every: int = 0, eval_set=None,
        on_epoch: Callable[[EpochRecord], None] | None = None):
    """Train on a list of scene cubes against one coded mask.

    Returns (params, history). Epochs [0, phase_switch) run the encoding
    objective with alpha_pre; the rest run the emphasis objective with
    alpha_main. mode "recon_only" ignores the phases and trains plain L1
    (the ablation baseline). Deterministic for a fixed seed.
    """
    if mode not in MODES:
        raise ContractError(f"fit: mode must be one of {MODES}, got {mode!r}")
    data = list(dataset)
    if not data:
        raise ContractError("fit: empty dataset")
    opt = opt or OptimizerState()
    rule = rule or ShearRule()
    if params is None:
        params = init_params(net_cfg, seed=seed)
    # recon-only training never touches the encode head, so the optimizer
    # must not demand gradients for it
    if mode == "recon_only":
        trainable = _NamedSubset([(n, t) for n, t in params.items()
                                  if not n.startswith("fh.")])
    else:
        trainable = params

    history: list[EpochRecord] = []
    for e in range(sched.total_epochs):
        lr = lr_at_epoch(e, sched, opt.base_lr)
        if mode == "recon_only":
            phase, alpha = "recon", 0.0
        elif e < sched.phase_switch:
            phase, alpha = "ME", alpha_pre
        else:
            phase, alpha = "MA", alpha_main
        loss_cfg = LossConfig(alpha=alpha if phase != "recon" else 0.0,
                              beta_ma=beta_ma, eps_den=eps_den,
                              reduction=reduction, patch=patch,
                              phase="MA" if phase == "MA" else "ME",
                              detach_weight=detach_weight)

        order = rng_for(seed, TAG_SHUFFLE, e).permutation(len(data))
        sums = np.zeros(6, dtype=np.float64)  # recon, me, ma, total, mmae, umae
        for b0 in range(0, len(order), sched.batch_size):
            batch = order[b0:b0 + sched.batch_size]
            params.zero_grads()
            for idx in batch:
                cube, mask_c = _crop_pair(data[idx], mask, crop,
                                          rng_for(seed, TAG_CROP, e, int(idx)))
                loss_t, parts, probe = _sample_loss(
                    cube, mask_c, params, net_cfg, rule, mode, loss_cfg,
                    noise_sigma, _int_seed(seed, TAG_NOISE, e, int(idx)))
                if not math.isfinite(parts[3]):
                    raise ContractError(
                        f"fit: non-finite loss at epoch {e}, scene {int(idx)}")
                ad.backward(ad.scale(loss_t, 1.0 / len(batch)))
                sums += (*parts, probe.masked_mae, probe.unmasked_mae)
            adam_step(trainable, opt, lr)

        n = float(len(order))
        rec = EpochRecord(epoch=e, phase=phase, lr=lr, alpha=alpha,
                          recon=sums[0] / n, me=sums[1] / n, ma=sums[2] / n,
                          total=sums[3] / n, masked_mae=sums[4] / n,
                          unmasked_mae=sums[5] / n)
        if eval_every > 0 and eval_set and (e + 1) % eval_every == 0:
            rec.eval = eval_model(params, net_cfg, eval_set, mask, rule,
                                  noise_sigma=noise_sigma, seed=seed)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return params, history


def eval_model(params: ModelParams, net_cfg: NetworkConfig, dataset,
               mask: CodedMask, rule: ShearRule | None = None,
               noise_sigma: float = 0.0, seed: int = 0) -> EvalResult:
    """Simulate, reconstruct, and score every scene against one mask."""
    rule = rule or ShearRule()
    data = list(dataset)
    if not data:
        raise ContractError("eval_model: empty dataset")
    ps, ss, mm, um, flags = [], [], [], [], []
    for i, cube in enumerate(data):
        y = form_measurement(cube, mask, rule, noise_sigma,
                             seed=_int_seed(seed, TAG_NOISE, 0, i))
        y_prime = init_input(y, mask, rule)
        with ad.no_grad():
            res = forward_tensors(ad.tensor(y_prime.data), params, net_cfg)
        recon = np.clip(res.recon.data, 0.0, 1.0)
        val = psnr(recon, cube.data)
        ps.append(val)
        flags.append(not math.isfinite(val))
        ss.append(ssim(recon, cube.data))
        probe = corollary_probe(recon, cube.data, mask)
        mm.append(probe.masked_mae)
        um.append(probe.unmasked_mae)
    return EvalResult(psnr=ps, ssim=ss, masked_mae=mm, unmasked_mae=um,
                      psnr_infinite=flags)
