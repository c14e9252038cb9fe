"""Reverse-mode automatic differentiation over dense numpy buffers.

Tensors hold float32 (or float64 for the high-precision check path) values in
C-contiguous row-major layout. Every differentiable op records a VJP closure
on the result tensor together with a monotone creation id; backward() walks
the reachable subgraph in exact reverse creation order, which fixes the
gradient accumulation order and makes repeated runs bit-identical.

The graph is implicit (each tensor carries its parents) and is confined to a
single thread of execution. Gradients accumulate across backward() calls
until the caller zeroes them.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes passed to an op do not line up."""


class ContractError(ValueError):
    """An op precondition was violated (non-scalar loss, missing grad, ...)."""


_grad_enabled = True
_finite_checks = False

GELU_CUBIC = 0.044715
LAYER_NORM_EPS = 1e-5


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / metrics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(on: bool) -> None:
    """Debug switch: verify every op output is finite (tests use this)."""
    global _finite_checks
    _finite_checks = bool(on)


class Tensor:
    """A dense array plus optional gradient and graph bookkeeping.

    data is always a C-contiguous numpy array of float32 or float64. grad,
    once populated, matches data's shape and dtype. Tensors created by ops
    carry the VJP closure and parent references used by backward().
    """

    __slots__ = ("data", "grad", "requires_grad", "_vjp", "_parents", "_gid")

    _counter = 0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # keep float64 only when handed an actual double array (check path)
            dtype = np.float64 if (isinstance(data, np.ndarray) and data.dtype == np.float64) \
                else np.float32
        # ascontiguousarray would promote rank-0 to (1,); keep scalars rank-0
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._vjp: Optional[Callable] = None
        self._parents: tuple = ()
        Tensor._counter += 1
        self._gid = Tensor._counter

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, attaching the VJP when recording is active."""
    if _finite_checks and not np.all(np.isfinite(out_data)):
        raise ContractError("op produced non-finite values")
    out = Tensor(out_data, dtype=out_data.dtype)
    if _grad_enabled and any(p.requires_grad or p._vjp is not None for p in parents):
        out.requires_grad = True
        out._vjp = vjp
        out._parents = tuple(parents)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the given shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b, "add")
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b, "mul")
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def vjp(g):
        return (g * s,)

    return _record(a.data * s, (a,), vjp)


def add_const(a: Tensor, c: float) -> Tensor:
    def vjp(g):
        return (g,)

    return _record(a.data + a.data.dtype.type(c), (a,), vjp)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    out = out.astype(a.data.dtype)

    def vjp(g):
        return (-g * out * out,)

    return _record(out, (a,), vjp)


def maximum_const(a: Tensor, c: float) -> Tensor:
    """Elementwise max with a constant floor; gradient passes where a >= c."""
    mask = a.data >= c
    out = np.where(mask, a.data, a.data.dtype.type(c))

    def vjp(g):
        return (g * mask,)

    return _record(out.astype(a.data.dtype), (a,), vjp)


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)

    def vjp(g):
        return (g * s,)

    return _record(np.abs(a.data), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: {a.shape} -> {shape} changes element count")
    src_shape = a.shape

    def vjp(g):
        return (np.ascontiguousarray(g).reshape(src_shape),)

    return _record(np.ascontiguousarray(a.data.reshape(shape)), (a,), vjp)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"permute: axes {axes} invalid for rank {a.data.ndim}")
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def vjp(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _record(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), vjp)


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError(f"transpose_last2: rank {a.data.ndim} < 2")
    axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    return permute(a, axes)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_last: empty input")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last: leading dims differ, {parts[0].shape} vs {p.shape}")
        _same_dtype(parts[0], p, "concat_last")
    sizes = [p.shape[-1] for p in parts]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.ascontiguousarray(g[..., offs[i]:offs[i + 1]]) for i in range(len(sizes)))

    return _record(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), vjp)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[-1]
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"slice_last: [{start}:{stop}] out of range for width {n}")
    shp = a.shape

    def vjp(g):
        full = np.zeros(shp, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _record(np.ascontiguousarray(a.data[..., start:stop]), (a,), vjp)


def gather_flat(a: Tensor, idx: np.ndarray, out_shape) -> Tensor:
    """out.flat[i] = a.flat[idx.flat[i]]; backward scatter-adds (np.add.at)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.size
    flat_idx = idx.reshape(-1)
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= n):
        raise DimensionError(f"gather_flat: index out of range for size {n}")
    out = a.data.reshape(-1)[flat_idx].reshape(tuple(out_shape))
    src_shape = a.shape

    def vjp(g):
        acc = np.zeros(n, dtype=g.dtype)
        np.add.at(acc, flat_idx, g.reshape(-1))
        return (acc.reshape(src_shape),)

    return _record(np.ascontiguousarray(out), (a,), vjp)


def roll2d(a: Tensor, sy: int, sx: int) -> Tensor:
    """Cyclically shift the first two axes."""
    if a.data.ndim < 2:
        raise DimensionError(f"roll2d: rank {a.data.ndim} < 2")

    def vjp(g):
        return (np.roll(g, (-sy, -sx), axis=(0, 1)),)

    return _record(np.ascontiguousarray(np.roll(a.data, (sy, sx), axis=(0, 1))), (a,), vjp)


def crop2d(a: Tensor, y0: int, x0: int, h: int, w: int) -> Tensor:
    """Take a spatial window from the first two axes; backward zero-pads."""
    H, W = a.shape[0], a.shape[1]
    if y0 < 0 or x0 < 0 or y0 + h > H or x0 + w > W:
        raise DimensionError(f"crop2d: window {h}x{w}@({y0},{x0}) exceeds {H}x{W}")
    shp = a.shape

    def vjp(g):
        full = np.zeros(shp, dtype=g.dtype)
        full[y0:y0 + h, x0:x0 + w] = g
        return (full,)

    return _record(np.ascontiguousarray(a.data[y0:y0 + h, x0:x0 + w]), (a,), vjp)


def pad_reflect2d(a: Tensor, py: int, px: int) -> Tensor:
    """Reflect-pad the trailing edge of the first two axes (no edge repeat)."""
    H, W = a.shape[0], a.shape[1]
    if py >= H or px >= W:
        raise DimensionError(f"pad_reflect2d: pad ({py},{px}) too large for {H}x{W}")
    ys = np.concatenate([np.arange(H), H - 2 - np.arange(py)])
    xs = np.concatenate([np.arange(W), W - 2 - np.arange(px)])
    rest = a.shape[2:]
    inner = int(np.prod(rest, dtype=np.int64)) if rest else 1
    grid = (ys[:, None] * W + xs[None, :]) * inner
    idx = (grid[..., None] + np.arange(inner)[None, None, :]).reshape(-1)
    return gather_flat(a, idx, (H + py, W + px) + rest)


def sum_all(a: Tensor) -> Tensor:
    shp = a.shape

    def vjp(g):
        return (np.full(shp, g.reshape(()), dtype=g.dtype),)

    return _record(a.data.sum(dtype=a.data.dtype).reshape(()), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the trailing axis."""
    n = a.shape[-1]

    def vjp(g):
        return (np.repeat(g[..., None], n, axis=-1),)

    return _record(np.ascontiguousarray(a.data.sum(axis=-1, dtype=a.data.dtype)), (a,), vjp)


def mean_last(a: Tensor) -> Tensor:
    return scale(sum_last(a), 1.0 / a.shape[-1])


# ---------------------------------------------------------------------------
# linear algebra and nonlinearities
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contract the last axis of a with the second-to-last of b.

    Supports plain 2D x 2D, equal leading batch dims, and a 2D operand
    broadcast against a batched one (the patterns the network uses).
    """
    _same_dtype(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: ranks {a.data.ndim} and {b.data.ndim} (need >= 2)")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    if a.data.ndim > 2 and b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(np.ascontiguousarray(out), (a, b), vjp)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilized by max subtraction."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)
    out = out.astype(x.dtype)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    k = x.dtype.type(math.sqrt(2.0 / math.pi))
    c = x.dtype.type(GELU_CUBIC)
    u = k * (x + c * x * x * x)
    t = np.tanh(u)
    out = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def vjp(g):
        sech2 = 1.0 - t * t
        du = k * (1.0 + 3.0 * c * x * x)
        return ((g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du)).astype(x.dtype),)

    return _record(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the trailing axis to mean 0 / variance 1, then affine."""
    c = a.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match width {c}")
    _same_dtype(a, gain, "layer_norm")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = (xhat * gain.data + bias.data).astype(x.dtype)
    gd = gain.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gd
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = (gx - m1 - xhat * m2) * inv
        return dx.astype(x.dtype), dgain.astype(x.dtype), dbias.astype(x.dtype)

    return _record(out, (a, gain, bias), vjp)


def conv2d_3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, on an h x w x cin map.

    kernel is (3, 3, cin, cout); output is h x w x cout. Forward and backward
    accumulate over the nine taps in fixed order so results are reproducible.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d_3x3: input rank {x.data.ndim}, expected h x w x cin")
    if kernel.data.ndim != 4 or kernel.shape[0] != 3 or kernel.shape[1] != 3:
        raise DimensionError(f"conv2d_3x3: kernel shape {kernel.shape}, expected (3,3,cin,cout)")
    h, w, cin = x.shape
    if kernel.shape[2] != cin:
        raise DimensionError(
            f"conv2d_3x3: input channels {x.shape} vs kernel {kernel.shape}")
    cout = kernel.shape[3]
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d_3x3: bias {bias.shape}, expected ({cout},)")
    _same_dtype(x, kernel, "conv2d_3x3")

    xp = np.zeros((h + 2, w + 2, cin), dtype=x.data.dtype)
    xp[1:h + 1, 1:w + 1] = x.data
    out = np.zeros((h * w, cout), dtype=x.data.dtype)
    kd = kernel.data
    for dy in range(3):
        for dx in range(3):
            patch = xp[dy:dy + h, dx:dx + w].reshape(h * w, cin)
            out += patch @ kd[dy, dx]
    out = out.reshape(h, w, cout) + bias.data

    def vjp(g):
        g2 = g.reshape(h * w, cout)
        dk = np.zeros_like(kd)
        dxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                patch = xp[dy:dy + h, dx:dx + w].reshape(h * w, cin)
                dk[dy, dx] = patch.T @ g2
                dxp[dy:dy + h, dx:dx + w] += (g2 @ kd[dy, dx].T).reshape(h, w, cin)
        db = g2.sum(axis=0)
        return dxp[1:h + 1, 1:w + 1], dk, db

    return _record(np.ascontiguousarray(out), (x, kernel, bias), vjp)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dT into .grad of every requires_grad tensor.

    loss must be scalar. Nodes are visited in exact reverse creation order;
    repeated calls without zeroing grads accumulate.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss has shape {loss.shape}, expected a scalar")
    if loss._vjp is None and not loss.requires_grad:
        return

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._gid, reverse=True)

    # per-call buffers keep repeated backward() calls linear (each call adds
    # exactly one dLoss/dT everywhere instead of compounding stale grads)
    buf = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = buf.get(id(t))
        if g is None or t._vjp is None:
            continue
        for parent, pg in zip(t._parents, t._vjp(g)):
            if not (parent.requires_grad or parent._vjp is not None):
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            prev = buf.get(id(parent))
            buf[id(parent)] = pg if prev is None else prev + pg

    for t in nodes:
        g = buf.get(id(t))
        if g is None or not t.requires_grad:
            continue
        t.grad = g if t.grad is None else t.grad + g


class GradCheckReport:
    """Per-parameter relative errors from a central-difference comparison."""

    def __init__(self, errors: dict, tol: float):
        self.errors = errors
        self.tol = tol
        self.failures = [k for k, v in errors.items() if not (v < tol)]
        self.max_rel_err = max(errors.values()) if errors else 0.0
        self.passed = not self.failures

    def __repr__(self) -> str:
        status = "pass" if self.passed else f"FAIL {self.failures}"
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.1e}, {status})"


def grad_check(f: Callable[[], Tensor], params: Iterable[tuple],
               step: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of f() against central differences.

    f is a pure scalar function of the parameter tensors' current values.
    params is a sequence of (name, Tensor). Relative error per parameter is
    ||analytic - numeric||_inf / (||analytic||_inf + ||numeric||_inf + tiny).
    """
    params = list(params)
    for name, p in params:
        if not p.requires_grad:
            raise ContractError(f"grad_check: parameter {name} does not require grad")
        p.zero_grad()

    loss = f()
    backward(loss)
    analytic = {}
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"grad_check: no gradient reached parameter {name}")
        analytic[name] = np.array(p.grad, dtype=np.float64, copy=True)
        p.zero_grad()

    errors = {}
    for name, p in params:
        num = np.zeros(p.data.shape, dtype=np.float64).reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            fp = float(f().data.reshape(-1)[0])
            flat[i] = keep - step
            fm = float(f().data.reshape(-1)[0])
            flat[i] = keep
            num[i] = (fp - fm) / (2.0 * step)
        num = num.reshape(p.data.shape)
        a = analytic[name]
        denom = np.abs(a).max() + np.abs(num).max() + 1e-12
        errors[name] = float(np.abs(a - num).max() / denom)
    return GradCheckReport(errors, tol)
