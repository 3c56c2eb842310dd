"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor produced by an op keeps a reference to its parents and a
backward rule. Calling :func:`backward` on a scalar sorts the recorded graph
topologically (the tape) and walks it once in reverse.

Layout for image tensors is ``(batch, channels, height, width)``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(
            data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; reset them with ``zero_grad``.
    Leaves with ``requires_grad`` but no path to the loss get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                if g is None:
                    g = np.zeros_like(node.data)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar operands are ever broadcast
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant (non-differentiable) array of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape and c.size != 1:
        raise ShapeError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    return _node(x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)
    return _node(out, (x,), bw)


def absolute(x: Tensor) -> Tensor:
    """|x| with sign subgradient (0 at exact zeros)."""
    xd = x.data
    return _node(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    xd = x.data
    pos = xd >= 0
    return _node(np.where(pos, xd, slope * xd), (x,),
                 lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- reductions / shape

def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)
    return _node(np.asarray(out, dtype=np.float64), (x,), bw)


def mean(x: Tensor) -> Tensor:
    return mul(sum_(x), 1.0 / x.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly repeat size-1 axes of ``x`` up to ``shape`` (same rank)."""
    shape = tuple(shape)
    if len(shape) != x.data.ndim or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)
    return _node(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (g.sum(axis=axes, keepdims=True),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _node(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :ca], g[:, ca:]))


def concat(*tensors: Tensor) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = concat_channels(out, t)
    return out


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation via an im2col matrix product."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cin}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    k, d, s, p = kh, dilation, stride, padding
    span = d * (k - 1) + 1
    Ho = (H + 2 * p - span) // s + 1
    Wo = (W + 2 * p - span) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d: output would be empty")

    pointwise = k == 1 and s == 1 and p == 0
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(Cout, k * k * C)

    def im2col():
        # (B, k, k, C, Ho*Wo) order so every tap is one contiguous block
        if pointwise:
            return x.data.reshape(B, C, H * W)
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        cols6 = np.empty((B, k, k, C, Ho, Wo))
        for i in range(k):
            for j in range(k):
                cols6[:, i, j] = xp[:, :, i * d: i * d + s * (Ho - 1) + 1: s,
                                    j * d: j * d + s * (Wo - 1) + 1: s]
        return cols6.reshape(B, k * k * C, Ho * Wo)

    out = wmat @ im2col()
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, Cout, Ho, Wo)

    def bw(g):
        g3 = g.reshape(B, Cout, Ho * Wo)
        gw = gb = gx = None
        if weight.requires_grad:
            # rebuilt rather than kept alive: the columns are k*k times the input
            gw = np.matmul(g3, im2col().transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(Cout, k, k, C).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = wmat.T @ g3
            if pointwise:
                gx = gcols.reshape(B, C, H, W)
            else:
                gcols = gcols.reshape(B, k, k, C, Ho, Wo)
                gxp = np.zeros((B, C, H + 2 * p, W + 2 * p))
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i * d: i * d + s * (Ho - 1) + 1: s,
                            j * d: j * d + s * (Wo - 1) + 1: s] += gcols[:, i, j]
                gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


# ---------------------------------------------------------------- normalization

def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place (unbiased variance, as is usual).
    """
    B, C, H, W = x.shape
    n = B * H * W
    xd = x.data
    if training:
        if n < 2:
            raise ShapeError("batchnorm2d in train mode needs B*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def bw(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        gxhat = g * scale.data[None, :, None, None]
        if training:
            gx = (inv[None, :, None, None] / n) * (
                n * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gscale, gshift

    return _node(out, (x, scale, shift), bw)


# ---------------------------------------------------------------- resampling

def maxpool2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; ties route to the first tap in scan order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(B, C, H, W),)

    return _node(out, (x,), bw)


def _scaled_size(n: int, factor: float) -> int:
    return int(math.floor(n * factor + 0.5))


def interp_matrix(n_in: int, n_out: int, factor: float) -> np.ndarray:
    """Row ``o`` holds the half-pixel bilinear weights for output index ``o``."""
    A = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        A[o, i0] += 1.0 - w
        A[o, i1] += w
    return A


def _resample(x: Tensor, Ho: int, Wo: int, fh: float, fw: float) -> Tensor:
    B, C, H, W = x.shape
    if Ho == H and Wo == W and fh == 1.0 and fw == 1.0:
        return _node(x.data.copy(), (x,), lambda g: (g,))
    Ah = interp_matrix(H, Ho, fh)
    Aw = interp_matrix(W, Wo, fw)
    out = np.einsum("oh,bchw,pw->bcop", Ah, x.data, Aw, optimize=True)
    return _node(out, (x,),
                 lambda g: (np.einsum("oh,bcop,pw->bchw", Ah, g, Aw, optimize=True),))


def upsample_bilinear(x: Tensor, factor: float) -> Tensor:
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    B, C, H, W = x.shape
    Ho, Wo = _scaled_size(H, factor), _scaled_size(W, factor)
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"upsample_bilinear: {H}x{W} * {factor} gives an empty output")
    return _resample(x, Ho, Wo, factor, factor)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize to an explicit (H, W) with per-axis factor out/in."""
    Ho, Wo = size
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"resize_bilinear: invalid size {size}")
    _, _, H, W = x.shape
    return _resample(x, Ho, Wo, Ho / H, Wo / W)
