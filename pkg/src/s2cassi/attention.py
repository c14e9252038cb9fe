"""Windowed spatial and spectral self-attention blocks.

Feature maps are cut into non-overlapping M x M windows. Inside a window,
spatial attention relates the M^2 tokens (attention matrix M^2 x M^2) and
spectral attention relates the C_h channels of a head (attention matrix
C_h x C_h, independent of token count). Four block variants stack these:
doubled spatial, doubled spectral, sequential spectral-then-spatial, and
parallel branches fused by a linear projection.

Per-head ops (qkv_project / spa_msa / spe_msa) operate on one window and one
head. The batched model path projects the full embedding width and splits
heads afterward; tests cross-check it against the per-head ops with
block-diagonal weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

VARIANTS = ("spa_spa", "spe_spe", "sequn_ss", "parall_ss")


@dataclass
class WindowGrid:
    """Partition layout for an h x w map with optional cyclic shift."""

    h: int
    w: int
    m: int = 8
    shift: int = 0

    def __post_init__(self):
        if self.m <= 0:
            raise ContractError(f"WindowGrid: window size {self.m} <= 0")
        if self.h % self.m or self.w % self.m:
            raise DimensionError(
                f"WindowGrid: {self.h}x{self.w} not divisible by m={self.m} (pad first)")

    @property
    def n_windows(self) -> int:
        return (self.h // self.m) * (self.w // self.m)

    def layout(self) -> np.ndarray:
        """(h, w, 2) array giving the (window, token) index of each pixel."""
        wi = np.arange(self.h)[:, None] // self.m * (self.w // self.m) + np.arange(self.w)[None, :] // self.m
        tok = (np.arange(self.h)[:, None] % self.m) * self.m + np.arange(self.w)[None, :] % self.m
        return np.stack([wi, tok], axis=-1)


@dataclass
class HeadConfig:
    """Multi-head split: t heads of c_h = floor(C/T) channels each."""

    t: int
    c_h: int

    @staticmethod
    def for_width(c: int, t: int) -> "HeadConfig":
        if t <= 0 or c <= 0:
            raise ContractError(f"HeadConfig: c={c}, t={t} must be positive")
        return HeadConfig(t=t, c_h=c // t)


def beta_init(c_h: int) -> float:
    """Learnable attention temperature starts at sqrt(C_h)."""
    return math.sqrt(c_h)


def window_partition(x: Tensor, grid: WindowGrid) -> Tensor:
    """h x w x c map -> (n_windows, m^2, c) token stacks, row-major per window."""
    h, w, m = grid.h, grid.w, grid.m
    if x.shape[:2] != (h, w):
        raise DimensionError(f"window_partition: input {x.shape} vs grid {h}x{w}")
    c = x.shape[2]
    if grid.shift:
        x = ad.roll2d(x, -grid.shift, -grid.shift)
    x = ad.reshape(x, (h // m, m, w // m, m, c))
    x = ad.permute(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (grid.n_windows, m * m, c))


def window_merge(xw: Tensor, grid: WindowGrid) -> Tensor:
    """Exact inverse of window_partition."""
    h, w, m = grid.h, grid.w, grid.m
    c = xw.shape[-1]
    if xw.shape[:2] != (grid.n_windows, m * m):
        raise DimensionError(f"window_merge: input {xw.shape} vs grid of {grid.n_windows} windows")
    x = ad.reshape(xw, (h // m, w // m, m, m, c))
    x = ad.permute(x, (0, 2, 1, 3, 4))
    x = ad.reshape(x, (h, w, c))
    if grid.shift:
        x = ad.roll2d(x, grid.shift, grid.shift)
    return x


def window_partition_merge(x: Tensor, grid: WindowGrid, direction: str) -> Tensor:
    if direction == "partition":
        return window_partition(x, grid)
    if direction == "merge":
        return window_merge(x, grid)
    raise ContractError(f"window_partition_merge: direction {direction!r}")


@lru_cache(maxsize=None)
def relative_index_map(m: int) -> np.ndarray:
    """(m^2, m^2) indices into the (2m-1)^2 relative-position table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"), -1).reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :]
    return ((rel[..., 0] + m - 1) * (2 * m - 1) + (rel[..., 1] + m - 1)).astype(np.int64)


def expand_spatial_bias(table: Tensor, m: int) -> Tensor:
    """Relative-position table (per head) -> per-head m^2 x m^2 bias matrix.

    table is ((2m-1)^2,) for one head or (t, (2m-1)^2) stacked.
    """
    n_entries = (2 * m - 1) ** 2
    idx = relative_index_map(m)
    if table.shape[-1] != n_entries:
        raise DimensionError(
            f"expand_spatial_bias: table width {table.shape} vs (2m-1)^2={n_entries}")
    if table.data.ndim == 1:
        return ad.gather_flat(table, idx, (m * m, m * m))
    t = table.shape[0]
    full = idx[None, :, :] + (np.arange(t) * n_entries)[:, None, None]
    return ad.gather_flat(table, full, (t, m * m, m * m))


# ---------------------------------------------------------------------------
# per-head attention (one window, one head)
# ---------------------------------------------------------------------------

def qkv_project(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor):
    """Linear query/key/value projections of a token stack (no bias)."""
    return ad.matmul(z, wq), ad.matmul(z, wk), ad.matmul(z, wv)


BETA_FLOOR = 1e-6  # keeps the temperature division finite even at beta = 0


def _inv_beta(beta: Tensor) -> Tensor:
    return ad.reciprocal(ad.maximum_const(beta, BETA_FLOOR))


def spa_msa(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
            beta: Tensor, bias: Tensor):
    """Token-wise attention: A = softmax(K Q^T / beta + B), out = A V.

    A is (m^2, m^2) and row-stochastic. Returns (output, A).
    """
    q, k, v = qkv_project(z, wq, wk, wv)
    scores = ad.mul(ad.matmul(k, ad.transpose_last2(q)), _inv_beta(beta))
    a = ad.softmax_last(ad.add(scores, bias))
    return ad.matmul(a, v), a


def spe_msa(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
            beta: Tensor, bias: Tensor):
    """Channel-wise attention: A = softmax(K^T Q / beta + B), out = V A.

    A is (c_h, c_h) regardless of token count, normalized over its first
    index so each output channel is a convex combination of value channels.
    Returns (output, A).
    """
    q, k, v = qkv_project(z, wq, wk, wv)
    scores = ad.mul(ad.matmul(ad.transpose_last2(k), q), _inv_beta(beta))
    scores = ad.add(scores, bias)
    a = ad.transpose_last2(ad.softmax_last(ad.transpose_last2(scores)))
    return ad.matmul(v, a), a


# ---------------------------------------------------------------------------
# batched multi-head attention over all windows
# ---------------------------------------------------------------------------

def _split_heads(x: Tensor, t: int, c_h: int) -> Tensor:
    """(nW, m^2, t*c_h) -> (t, nW, m^2, c_h)."""
    nw, toks = x.shape[0], x.shape[1]
    x = ad.reshape(x, (nw, toks, t, c_h))
    return ad.permute(x, (2, 0, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    """(t, nW, m^2, c_h) -> (nW, m^2, t*c_h)."""
    t, nw, toks, c_h = x.shape
    x = ad.permute(x, (1, 2, 0, 3))
    return ad.reshape(x, (nw, toks, t * c_h))


def multi_head_msa(z: Tensor, params: Mapping[str, Tensor], prefix: str,
                   kind: str, t: int, m: int) -> Tensor:
    """Full-width multi-head attention over (nW, m^2, C) token stacks.

    Q/K/V are projected at width C and split into t heads of c_h channels;
    any remainder channels skip attention through the value path. Head
    outputs are concatenated and linearly projected back to width C.
    """
    c = z.shape[-1]
    c_h = c // t
    used = t * c_h
    wq, wk, wv = params[f"{prefix}.wq"], params[f"{prefix}.wk"], params[f"{prefix}.wv"]
    q, k, v = qkv_project(z, wq, wk, wv)

    qh = _split_heads(ad.slice_last(q, 0, used), t, c_h)
    kh = _split_heads(ad.slice_last(k, 0, used), t, c_h)
    vh = _split_heads(ad.slice_last(v, 0, used), t, c_h)

    inv_beta = ad.reshape(_inv_beta(params[f"{prefix}.beta"]), (t, 1, 1, 1))
    bias = params[f"{prefix}.bias"]
    if kind == "spa":
        scores = ad.matmul(kh, ad.transpose_last2(qh))          # (t, nW, m^2, m^2)
        bmat = expand_spatial_bias(bias, m)                      # (t, m^2, m^2)
        bmat = ad.reshape(bmat, (t, 1, m * m, m * m))
        a = ad.softmax_last(ad.add(ad.mul(scores, inv_beta), bmat))
        out = ad.matmul(a, vh)
    elif kind == "spe":
        scores = ad.matmul(ad.transpose_last2(kh), qh)           # (t, nW, c_h, c_h)
        bmat = ad.reshape(bias, (t, 1, c_h, c_h))
        s = ad.add(ad.mul(scores, inv_beta), bmat)
        a = ad.transpose_last2(ad.softmax_last(ad.transpose_last2(s)))
        out = ad.matmul(vh, a)
    else:
        raise ContractError(f"multi_head_msa: unknown kind {kind!r}")

    merged = _merge_heads(out)
    if used < c:
        merged = ad.concat_last([merged, ad.slice_last(v, used, c)])
    return ad.add(ad.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def ffn_forward(z: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Linear -> GELU -> Linear -> GELU token MLP."""
    h = ad.gelu(ad.add(ad.matmul(z, params["ffn.w1"]), params["ffn.b1"]))
    return ad.gelu(ad.add(ad.matmul(h, params["ffn.w2"]), params["ffn.b2"]))


def _ln(z: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return ad.layer_norm(z, params[f"{name}.g"], params[f"{name}.b"])


def block_forward(z: Tensor, variant: str, params: Mapping[str, Tensor],
                  t: int, m: int) -> Tensor:
    """One attention block on window-partitioned tokens.

    z is (n_windows, m^2, C) (a single (m^2, C) window is promoted). The
    doubled variants run LN-MSA-residual twice; sequn chains spectral then
    spatial; parall fuses both branches of one shared LN through a linear
    projection. All variants end with LN-FFN-residual.
    """
    squeeze = z.data.ndim == 2
    if squeeze:
        z = ad.reshape(z, (1,) + z.shape)

    if variant == "spa_spa" or variant == "spe_spe":
        kind = "spa" if variant == "spa_spa" else "spe"
        z = ad.add(z, multi_head_msa(_ln(z, params, "ln1"), params, f"{kind}1", kind, t, m))
        z = ad.add(z, multi_head_msa(_ln(z, params, "ln2"), params, f"{kind}2", kind, t, m))
        z = ad.add(z, ffn_forward(_ln(z, params, "ln3"), params))
    elif variant == "sequn_ss":
        z = ad.add(z, multi_head_msa(_ln(z, params, "ln1"), params, "spe", "spe", t, m))
        z = ad.add(z, multi_head_msa(_ln(z, params, "ln2"), params, "spa", "spa", t, m))
        z = ad.add(z, ffn_forward(_ln(z, params, "ln3"), params))
    elif variant == "parall_ss":
        zin = _ln(z, params, "ln_in")
        spe = multi_head_msa(zin, params, "spe", "spe", t, m)
        spa = multi_head_msa(zin, params, "spa", "spa", t, m)
        cat = ad.concat_last([spe, spa])
        z = ad.add(z, ad.add(ad.matmul(cat, params["cat.w"]), params["cat.b"]))
        z = ad.add(z, ffn_forward(_ln(z, params, "ln_ffn"), params))
    else:
        raise ContractError(f"block_forward: unknown variant {variant!r}")

    if squeeze:
        z = ad.reshape(z, z.shape[1:])
    return z


def _msa_param_shapes(prefix: str, kind: str, c: int, t: int, m: int) -> list:
    c_h = c // t
    bias_shape = (t, (2 * m - 1) ** 2) if kind == "spa" else (t, c_h, c_h)
    return [
        (f"{prefix}.wq", (c, c)),
        (f"{prefix}.wk", (c, c)),
        (f"{prefix}.wv", (c, c)),
        (f"{prefix}.wo", (c, c)),
        (f"{prefix}.bo", (c,)),
        (f"{prefix}.beta", (t,)),
        (f"{prefix}.bias", bias_shape),
    ]


def block_param_shapes(variant: str, c: int, t: int, m: int, ffn_mult: int) -> list:
    """Ordered (name, shape) pairs for one block (checkpoint order)."""
    if variant not in VARIANTS:
        raise ContractError(f"block_param_shapes: unknown variant {variant!r}")
    hid = ffn_mult * c
    ln = lambda name: [(f"{name}.g", (c,)), (f"{name}.b", (c,))]
    ffn = [("ffn.w1", (c, hid)), ("ffn.b1", (hid,)),
           ("ffn.w2", (hid, c)), ("ffn.b2", (c,))]
    if variant in ("spa_spa", "spe_spe"):
        kind = "spa" if variant == "spa_spa" else "spe"
        return (ln("ln1") + _msa_param_shapes(f"{kind}1", kind, c, t, m)
                + ln("ln2") + _msa_param_shapes(f"{kind}2", kind, c, t, m)
                + ln("ln3") + ffn)
    if variant == "sequn_ss":
        return (ln("ln1") + _msa_param_shapes("spe", "spe", c, t, m)
                + ln("ln2") + _msa_param_shapes("spa", "spa", c, t, m)
                + ln("ln3") + ffn)
    return (ln("ln_in") + _msa_param_shapes("spe", "spe", c, t, m)
            + _msa_param_shapes("spa", "spa", c, t, m)
            + [("cat.w", (2 * c, c)), ("cat.b", (c,))]
            + ln("ln_ffn") + ffn)
