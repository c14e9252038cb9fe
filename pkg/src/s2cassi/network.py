"""Full reconstruction network: extractor, K residual attention stages, and
the reconstruction / encode heads.

A stage chains L windowed attention blocks (window partition and merge wrap
every block; every second block uses a cyclic half-window shift) followed by
a 3x3 conv whose output is added back to the stage input. The encode head
f_h (LN + 3x3 conv) taps the stage-k_me output and predicts the masked scene
for the measurement-encoding objective; the reconstruction head has no
output activation, values are clamped only for metrics and file output.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import attention as at
from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .optics import HyperCube, rng_for


@dataclass
class NetworkConfig:
    k: int = 4             # stages
    l: int = 6             # blocks per stage
    c: int = 60            # embedding channels
    t: int = 6             # attention heads
    m: int = 8             # window size
    n_lambda: int = 28     # spectral channels
    variant: str = "parall_ss"
    k_me: int = 2          # encode-head tap stage (1-based)
    ffn_mult: int = 2
    cyclic_shift: bool = True

    def __post_init__(self):
        for field in ("k", "l", "c", "t", "m", "n_lambda"):
            if getattr(self, field) <= 0:
                raise ContractError(f"NetworkConfig: {field} must be positive")
        if self.variant not in at.VARIANTS:
            raise ContractError(f"NetworkConfig: unknown variant {self.variant!r}")
        # the tap must sit strictly inside the stage chain; a single-stage
        # model keeps the degenerate tap 1 (usable only without the ME phase)
        hi = max(self.k - 1, 1)
        if not (1 <= self.k_me <= hi):
            raise ContractError(
                f"NetworkConfig: k_me={self.k_me} outside [1, {hi}] for k={self.k}")
        if self.ffn_mult <= 0:
            raise ContractError("NetworkConfig: ffn_mult must be positive")

    @property
    def c_h(self) -> int:
        return self.c // self.t


class ModelParams:
    """Ordered, uniquely named parameter tensors (checkpoint order)."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._tensors:
            raise ContractError(f"ModelParams: duplicate name {name!r}")
        self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def block_params(self, stage: int, block: int) -> dict:
        prefix = f"stage{stage}.block{block}."
        return {n[len(prefix):]: t for n, t in self._tensors.items() if n.startswith(prefix)}

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())


def param_count(params: ModelParams) -> int:
    return params.count()


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                  bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out.astype(np.float32)


def param_shapes(cfg: NetworkConfig) -> list:
    """Ordered (name, shape) list for the whole model."""
    shapes = [("extractor.w", (3, 3, cfg.n_lambda, cfg.c)), ("extractor.b", (cfg.c,))]
    for k in range(cfg.k):
        for l in range(cfg.l):
            for rel, shp in at.block_param_shapes(cfg.variant, cfg.c, cfg.t, cfg.m, cfg.ffn_mult):
                shapes.append((f"stage{k}.block{l}.{rel}", shp))
        shapes.append((f"stage{k}.conv.w", (3, 3, cfg.c, cfg.c)))
        shapes.append((f"stage{k}.conv.b", (cfg.c,)))
    shapes += [("head.w", (3, 3, cfg.c, cfg.n_lambda)), ("head.b", (cfg.n_lambda,)),
               ("fh.ln.g", (cfg.c,)), ("fh.ln.b", (cfg.c,)),
               ("fh.conv.w", (3, 3, cfg.c, cfg.n_lambda)), ("fh.conv.b", (cfg.n_lambda,))]
    return shapes


def init_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Truncated-normal weights (sigma 0.02), unit norm gains, zero biases,
    zero stage output convs so training starts near identity stages."""
    rng = rng_for(seed, 0xD4)
    params = ModelParams()
    stage_conv = re.compile(r"^stage\d+\.conv\.w$")
    for name, shape in param_shapes(cfg):
        if name.endswith(".g"):
            vals = np.ones(shape, dtype=np.float32)
        elif name.endswith((".b", ".bo", ".b1", ".b2")):
            vals = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".beta"):
            vals = np.full(shape, at.beta_init(cfg.c_h), dtype=np.float32)
        elif stage_conv.match(name):
            vals = np.zeros(shape, dtype=np.float32)
        else:
            vals = _trunc_normal(rng, shape)
        params.add(name, ad.tensor(vals.astype(dtype), requires_grad=True, dtype=dtype))
    return params


def _blocks_chain(z: Tensor, params: ModelParams, cfg: NetworkConfig, stage: int,
                  tap_block: int | None = None):
    """Run the L partition-block-merge rounds of one stage.

    Returns (features, tapped) where tapped is the post-block map requested
    by tap_block (0-based), already merged back to h x w x c.
    """
    h, w = z.shape[0], z.shape[1]
    pad_h = (-h) % cfg.m
    pad_w = (-w) % cfg.m
    x = ad.pad_reflect2d(z, pad_h, pad_w) if (pad_h or pad_w) else z
    tapped = None
    for l in range(cfg.l):
        shift = cfg.m // 2 if (cfg.cyclic_shift and l % 2 == 1) else 0
        grid = at.WindowGrid(h + pad_h, w + pad_w, cfg.m, shift=shift)
        tokens = at.window_partition(x, grid)
        tokens = at.block_forward(tokens, cfg.variant, params.block_params(stage, l),
                                  cfg.t, cfg.m)
        x = at.window_merge(tokens, grid)
        if tap_block == l:
            tapped = ad.crop2d(x, 0, 0, h, w) if (pad_h or pad_w) else x
    if pad_h or pad_w:
        x = ad.crop2d(x, 0, 0, h, w)
    return x, tapped


def stage_forward(z: Tensor, params: ModelParams, cfg: NetworkConfig, stage: int,
                  tap_block: int | None = None):
    """Z_k = Z_{k-1} + conv3x3(blocks(Z_{k-1}))."""
    x, tapped = _blocks_chain(z, params, cfg, stage, tap_block)
    x = ad.conv2d_3x3(x, params[f"stage{stage}.conv.w"], params[f"stage{stage}.conv.b"])
    out = ad.add(z, x)
    return (out, tapped) if tap_block is not None else out


class ForwardResult:
    """Holds the reconstruction plus the taps training and tooling need."""

    def __init__(self, recon: Tensor, z_kme: Tensor, tap: Tensor | None = None):
        self.recon = recon
        self.z_kme = z_kme
        self.tap = tap


def forward_tensors(y_prime: Tensor, params: ModelParams, cfg: NetworkConfig,
                    tap_stage: int | None = None, tap_block: int | None = None) -> ForwardResult:
    """Differentiable forward pass on an h x w x n_lambda input tensor."""
    if y_prime.shape[-1] != cfg.n_lambda:
        raise DimensionError(
            f"forward: input channels {y_prime.shape} vs n_lambda={cfg.n_lambda}")
    z = ad.conv2d_3x3(y_prime, params["extractor.w"], params["extractor.b"])
    z_kme = None
    tap = None
    for k in range(cfg.k):
        want_tap = tap_stage is not None and tap_stage == k
        if want_tap:
            z, tap = stage_forward(z, params, cfg, k, tap_block=tap_block)
        else:
            z = stage_forward(z, params, cfg, k)
        if k + 1 == cfg.k_me:
            z_kme = z
    recon = ad.conv2d_3x3(z, params["head.w"], params["head.b"])
    return ForwardResult(recon, z_kme, tap)


def full_forward(y_prime: HyperCube, params: ModelParams, cfg: NetworkConfig) -> HyperCube:
    """Inference driver: no graph, returns the raw (unclamped) reconstruction."""
    with ad.no_grad():
        res = forward_tensors(ad.tensor(y_prime.data), params, cfg)
    return HyperCube(res.recon.data)


def encode_head(z_kme: Tensor, params: ModelParams, cfg: NetworkConfig) -> Tensor:
    """f_h: LN over channels then 3x3 conv down to n_lambda channels."""
    z = ad.layer_norm(z_kme, params["fh.ln.g"], params["fh.ln.b"])
    return ad.conv2d_3x3(z, params["fh.conv.w"], params["fh.conv.b"])


def infer_config(params: ModelParams) -> NetworkConfig:
    """Rebuild a NetworkConfig from checkpoint tensor names and shapes.

    Everything structural is recoverable except the window size of pure
    spectral blocks (their bias carries no spatial extent), which falls back
    to the default 8; k_me (training-only) defaults to the deepest valid tap.
    Callers with exotic configs pass an explicit config instead.
    """
    names = params.names()
    if "extractor.w" not in params:
        raise ContractError("infer_config: missing extractor.w")
    _, _, n_lambda, c = params["extractor.w"].shape
    stages = set()
    blocks = set()
    for n in names:
        mm = re.match(r"stage(\d+)\.block(\d+)\.", n)
        if mm:
            stages.add(int(mm.group(1)))
            blocks.add(int(mm.group(2)))
    k, l = max(stages) + 1, max(blocks) + 1
    rel = {n.split(".", 2)[2] for n in names if n.startswith("stage0.block0.")}
    if any(r.startswith("cat.") for r in rel):
        variant = "parall_ss"
    elif any(r.startswith("spa1.") for r in rel):
        variant = "spa_spa"
    elif any(r.startswith("spe1.") for r in rel):
        variant = "spe_spe"
    else:
        variant = "sequn_ss"
    beta_name = next(n for n in names if n.startswith("stage0.block0.") and n.endswith(".beta"))
    t = params[beta_name].shape[0]
    spa_bias = [n for n in names
                if n.startswith("stage0.block0.") and n.endswith(".bias")
                and ("spa" in n.split(".")[2])]
    if spa_bias:
        entries = params[spa_bias[0]].shape[-1]
        m = (int(math.isqrt(entries)) + 1) // 2
    else:
        m = 8
    ffn_mult = params["stage0.block0.ffn.w1"].shape[1] // c
    return NetworkConfig(k=k, l=l, c=c, t=t, m=m, n_lambda=n_lambda, variant=variant,
                         k_me=max(1, min(2, k - 1)), ffn_mult=ffn_mult)
