"""2-D discrete Fourier transforms, phase/magnitude spectra, unwrapping and
frequency-domain filters, all differentiable through :mod:`phiseg.tensor`.

Transforms act on the last two axes, so a ``(B, C, M, N)`` tensor is
transformed image by image. Power-of-two sides use an iterative radix-2
FFT; any other side falls back to the direct O(n^2) transform, which also
serves as the FFT oracle in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _node, as_tensor, mul_const

EPS_PHASE = 1e-12
TWO_PI = 2.0 * math.pi

FILTER_KINDS = ("lowpass", "leaky_lowpass", "highpass", "none")


class FilterError(ValueError):
    pass


# ---------------------------------------------------------------- 1-D kernels

def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized radix-2 DIT transform along the last axis.

    ``inverse`` flips the twiddle sign only; callers apply 1/n themselves.
    """
    n = a.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"radix-2 transform needs a power-of-two length, got {n}")
    out = np.asarray(a, dtype=np.complex128)[..., _bit_reverse(n)]
    sign = 1.0 if inverse else -1.0
    lead = out.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        k = np.arange(half)
        tw = np.exp(sign * 2j * math.pi * k / m)
        blocks = out.reshape(*lead, n // m, 2, half)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        m *= 2
    return out


_DFT_CACHE: dict[tuple[int, bool], np.ndarray] = {}


def dft_matrix(n: int, inverse: bool = False) -> np.ndarray:
    key = (n, inverse)
    if key not in _DFT_CACHE:
        km = np.outer(np.arange(n), np.arange(n)) % n  # exact phase index
        sign = 1.0 if inverse else -1.0
        _DFT_CACHE[key] = np.exp(sign * 2j * math.pi * km / n)
    return _DFT_CACHE[key]


def dft_direct(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized direct transform along the last axis."""
    return np.asarray(a, dtype=np.complex128) @ dft_matrix(a.shape[-1], inverse).T


def _transform_axis(a: np.ndarray, axis: int, inverse: bool, method: str) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    if method == "auto":
        method = "fft" if _is_pow2(n) else "direct"
    out = fft_radix2(a, inverse) if method == "fft" else dft_direct(a, inverse)
    return np.moveaxis(out, -1, axis)


def fourier2(a: np.ndarray, inverse: bool = False, method: str = "auto") -> np.ndarray:
    """Unnormalized separable 2-D transform over the last two axes."""
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] == 0 or a.shape[-2] == 0:
        raise ShapeError(f"2-D transform needs a non-empty [..., M, N] array, got {a.shape}")
    out = _transform_axis(a, -1, inverse, method)
    return _transform_axis(out, -2, inverse, method)


# ---------------------------------------------------------------- spectra

@dataclass
class ComplexField:
    """A 2-D spectrum held as two equal-shape real tensors."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        self.re, self.im = as_tensor(self.re), as_tensor(self.im)
        if self.re.shape != self.im.shape:
            raise ShapeError(f"re/im shape mismatch {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape

    def to_complex(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


def _take(packed: Tensor, i: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(packed.data)
        full[i] = g
        return (full,)
    return _node(packed.data[i], (packed,), bw)


def dft2(x, method: str = "auto") -> ComplexField:
    """Forward 2-D DFT of a real tensor; backward applies the adjoint."""
    x = as_tensor(x)
    X = fourier2(x.data, inverse=False, method=method)

    def bw(g):
        gc = g[0] + 1j * g[1]
        return (fourier2(gc, inverse=True, method=method).real,)

    packed = _node(np.stack([X.real, X.imag]), (x,), bw)
    return ComplexField(_take(packed, 0), _take(packed, 1))


def idft2(X: ComplexField, method: str = "auto") -> tuple[Tensor, np.ndarray]:
    """Inverse 2-D DFT. Returns the real part (differentiable) and the
    imaginary residual as a plain array for diagnostics."""
    M, N = X.shape[-2:]
    scale = 1.0 / (M * N)
    z = fourier2(X.to_complex(), inverse=True, method=method) * scale

    def bw(g):
        G = fourier2(g, inverse=False, method=method) * scale
        return G.real, G.imag

    return _node(np.ascontiguousarray(z.real), (X.re, X.im), bw), z.imag


def magnitude(X: ComplexField) -> Tensor:
    re, im = X.re.data, X.im.data
    mag = np.hypot(re, im)

    def bw(g):
        safe = np.where(mag > 0, mag, 1.0)
        scale = np.where(mag > 0, g / safe, 0.0)
        return scale * re, scale * im

    return _node(mag, (X.re, X.im), bw)


def phase(X: ComplexField) -> Tensor:
    """Phase in (-pi, pi]; pinned to 0 (with zero gradient) where |X| < 1e-12."""
    re, im = X.re.data, X.im.data
    r2 = re * re + im * im
    small = r2 < EPS_PHASE * EPS_PHASE
    ph = np.where(small, 0.0, np.arctan2(im, re))
    ph = np.where(ph == -math.pi, math.pi, ph)

    def bw(g):
        inv = np.where(small, 0.0, g / np.where(small, 1.0, r2))
        return -im * inv, re * inv

    return _node(ph, (X.re, X.im), bw)


def wrap(p: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    return p - TWO_PI * np.ceil((p - math.pi) / TWO_PI)


def unwrap_axis(P, axis: str = "row") -> Tensor:
    """Remove 2*pi jumps along each 1-D line of the last two axes.

    ``axis="row"`` treats every row as a line (runs along the last axis),
    ``axis="col"`` every column. The first element of each line is kept and
    every consecutive difference ends up in (-pi, pi]. The gradient is the
    identity since the corrections are piecewise constant.
    """
    P = as_tensor(P)
    if axis not in ("row", "col"):
        raise ValueError(f"axis must be 'row' or 'col', got {axis!r}")
    ax = -1 if axis == "row" else -2
    d = np.diff(P.data, axis=ax)
    jumps = np.ceil((d - math.pi) / TWO_PI)  # integer count of 2*pi to remove
    steps = np.cumsum(jumps, axis=ax)
    pad = [(0, 0)] * P.data.ndim
    pad[ax] = (1, 0)
    steps = np.pad(steps, pad)
    return _node(P.data - steps * TWO_PI, (P,), lambda g: (g,))


# ---------------------------------------------------------------- filters

@dataclass(frozen=True)
class FilterSpec:
    kind: str = "lowpass"
    gamma: float = 3
    gamma_square_weight: bool = True

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise FilterError(f"unknown filter kind {self.kind!r}; expected one of {FILTER_KINDS}")
        if not self.gamma > 0:
            raise FilterError(f"gamma must be positive, got {self.gamma}")
        if self.kind in ("lowpass", "highpass") and float(self.gamma) != int(self.gamma):
            raise FilterError(f"{self.kind} needs an integer gamma, got {self.gamma}")


def centered_frequencies(n: int) -> np.ndarray:
    """Signed frequency of each unshifted index, with DC-centred wraparound."""
    c = n // 2
    return (np.arange(n) + c) % n - c


def _band_1d(n: int, g: int) -> np.ndarray:
    f = centered_frequencies(n)
    lo = -(g // 2)
    return (f >= lo) & (f < lo + g)


def lowpass_region(M: int, N: int, gamma: int) -> np.ndarray:
    """Boolean mask (unshifted layout) of the centred gamma x gamma block."""
    return np.outer(_band_1d(M, gamma), _band_1d(N, gamma))


def leaky_weights(M: int, N: int, gamma: float) -> np.ndarray:
    fk = centered_frequencies(M).astype(np.float64)
    fl = centered_frequencies(N).astype(np.float64)
    r = np.sqrt((fk[:, None] ** 2 + fl[None, :] ** 2) / (M * M + N * N))
    return (1.0 + r) ** (-float(gamma))


def filter_mask(M: int, N: int, spec: FilterSpec) -> np.ndarray:
    """Real multiplicative mask in unshifted frequency layout."""
    if spec.kind == "none":
        return np.ones((M, N))
    if spec.kind == "leaky_lowpass":
        return leaky_weights(M, N, spec.gamma)
    g = int(spec.gamma)
    if g > max(M, N):
        raise FilterError(f"gamma={g} exceeds the spectrum size {M}x{N}")
    keep = lowpass_region(M, N, g)
    if spec.kind == "highpass":
        keep = ~keep
    weight = float(g * g) if spec.gamma_square_weight else 1.0
    return np.where(keep, weight, 0.0)


def apply_filter(X: ComplexField, spec: FilterSpec) -> ComplexField:
    M, N = X.shape[-2:]
    mask = np.broadcast_to(filter_mask(M, N, spec), X.shape)
    return ComplexField(mul_const(X.re, mask), mul_const(X.im, mask))
