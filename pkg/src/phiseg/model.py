"""Phi-SegNet: encoder, BFMF fusion, attention gates, decoder, phi-conditioners
and reverse Fourier attention, aggregated into one prediction mask.

Shape table for an input of side H and encoder widths c_0..c_{n-1}:

    E_i        (B, c_i,     H/2^i)      i = 0..n-1
    y_i        (B, c_i,     H/2^i)      BFMF on (E_i, E_{i+1}), i = 0..n-2
    ys_i       (B, c_{i+1}, H/2^(i+1))
    E_A,i      (B, c_i,     H/2^i)      i = 0..n-2
    x_d,i      (B, c_i,     H/2^i)      decoder stage i, seeded by E_{n-1}
    x_phi,i    (B, 1,       H/2^i)
    x_rfa,i    (B, c_i,     H/2^i)
    pred       (B, 1,       H)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spectral as S
from . import tensor as T
from .nn import BatchNorm2d, Conv2d, ConvBNAct, DoubleConv, Module, _param
from .tensor import ShapeError, Tensor


@dataclass
class EncoderSpec:
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    in_channels: int = 1

    @property
    def levels(self) -> int:
        return len(self.channels)

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValueError("the encoder needs at least two levels")
        if any(c <= 0 for c in self.channels):
            raise ValueError(f"channel widths must be positive: {self.channels}")


class MkC(Module):
    """Parallel 1x1, 3x3 and dilated 5x5 (d=2) branches, each conv+BN+act."""

    def __init__(self, cin, cout, rng, slope=0.01):
        self.k1 = ConvBNAct(cin, cout, 1, rng, slope=slope)
        self.k3 = ConvBNAct(cin, cout, 3, rng, slope=slope)
        self.k5 = ConvBNAct(cin, cout, 5, rng, dilation=2, slope=slope)

    def __call__(self, x):
        return self.k1(x), self.k3(x), self.k5(x)


class BFMF(Module):
    """Bi-feature mask former over two adjacent encoder levels."""

    def __init__(self, c, cs_in, cs_out, rng, slope=0.01):
        self.mkc1 = MkC(c, c, rng, slope)
        self.project = Conv2d(cs_in, c, 1, rng)
        self.mkc2 = MkC(3 * c, c, rng, slope)
        self.fuse3 = Conv2d(3 * c, c, 3, rng)
        self.fuse1 = Conv2d(c, c, 1, rng)
        self.down = Conv2d(c, cs_out, 1, rng)

    def __call__(self, x: Tensor, xs: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[2] != 2 * xs.shape[2] or x.shape[3] != 2 * xs.shape[3]:
            raise ShapeError(f"BFMF: x {x.shape[2:]} must be exactly twice x_s {xs.shape[2:]}")
        p11, p21, p31 = self.mkc1(x)
        xc1 = T.concat(p11, p21, self.project(T.upsample_bilinear(xs, 2.0)))
        p12, p22, p32 = self.mkc2(xc1)
        y = T.sigmoid(self.fuse1(self.fuse3(T.concat(p12, p22, p31))))
        ys = T.maxpool2(self.down(T.sigmoid(p32)))
        return y, ys


class Attention(Module):
    """Residual gate E_A = E * E_m + E with E_m from neighbouring BFMF masks."""

    def __init__(self, c, c_prev, rng):
        self.conv1 = Conv2d(c_prev + c, c, 3, rng)
        self.bn1 = BatchNorm2d(c)
        self.conv2 = Conv2d(c, c, 3, rng)
        self.bn2 = BatchNorm2d(c)

    def gate(self, ys_prev: Tensor, y: Tensor) -> Tensor:
        if ys_prev.shape[2:] != y.shape[2:]:
            raise ShapeError(f"attention: mask sizes differ {ys_prev.shape} vs {y.shape}")
        h = self.bn1(self.conv1(T.concat_channels(ys_prev, y)))
        return T.sigmoid(self.bn2(self.conv2(h)))

    def __call__(self, E: Tensor, ys_prev: Tensor, y: Tensor) -> Tensor:
        Em = self.gate(ys_prev, y)
        if Em.shape != E.shape:
            raise ShapeError(f"attention: gate {Em.shape} vs features {E.shape}")
        return T.add(T.mul(E, Em), E)


class DecoderBlock(Module):
    def __init__(self, c_skip, c_prev, c_out, rng, slope=0.01):
        self.dc = DoubleConv(c_skip + c_prev, c_out, rng, slope)

    def __call__(self, EA: Tensor, x_prev: Tensor) -> Tensor:
        H, W = EA.shape[2:]
        h, w = x_prev.shape[2:]
        if (2 * h, 2 * w) == (H, W):
            x_prev = T.upsample_bilinear(x_prev, 2.0)
        elif (h, w) != (H, W):
            raise ShapeError(f"decoder: previous stage {h}x{w} does not fit skip {H}x{W}")
        return self.dc(T.concat_channels(EA, x_prev))


class PhiConditioner(Module):
    def __init__(self, c, rng):
        self.conv = Conv2d(c, 1, 1, rng)

    def __call__(self, x_d):
        return T.sigmoid(self.conv(x_d))


def reverse_fourier_mask(x_phi: Tensor, spec: S.FilterSpec) -> Tensor:
    """|IDFT(filter(DFT(1 - x_phi)))|, real part, per image."""
    X = S.dft2(T.sub(1.0, x_phi))
    real, _ = S.idft2(S.apply_filter(X, spec))
    return T.absolute(real)


class RFA(Module):
    def __init__(self, c, rng):
        self.conv = Conv2d(c, c, 3, rng)

    def __call__(self, x_phi: Tensor, x_d: Tensor, spec: S.FilterSpec) -> Tensor:
        B, C, H, W = x_d.shape
        if spec.kind in ("lowpass", "highpass") and min(H, W) < spec.gamma:
            raise ShapeError(f"RFA: stage {H}x{W} is smaller than gamma={spec.gamma}")
        xhat = reverse_fourier_mask(x_phi, spec)
        return self.conv(T.mul(x_d, T.expand(xhat, (B, C, H, W))))


class PhiSegNet(Module):
    def __init__(self, enc: EncoderSpec | None = None, filt: S.FilterSpec | None = None,
                 seed: int = 0, slope: float = 0.01):
        enc = enc or EncoderSpec()
        self.enc = enc
        self.filter = filt or S.FilterSpec()
        rng = np.random.default_rng(seed)
        ch = enc.channels
        n = enc.levels
        self.encoder = [DoubleConv(enc.in_channels if i == 0 else ch[i - 1], ch[i], rng, slope)
                        for i in range(n)]
        self.bfmf = [BFMF(ch[i], ch[i + 1], ch[i + 1], rng, slope) for i in range(n - 1)]
        # level 0 has no finer BFMF feeding its gate; a learned constant stands in
        self.gate_seed = _param(np.zeros((1, ch[0], 1, 1)))
        self.attention = [Attention(ch[i], ch[i], rng) for i in range(n - 1)]
        self.decoder = [DecoderBlock(ch[i], ch[i + 1], ch[i], rng, slope) for i in range(n - 1)]
        self.phi = [PhiConditioner(ch[i], rng) for i in range(n - 1)]
        self.rfa = [RFA(ch[i], rng) for i in range(n - 1)]
        self.head = [Conv2d(ch[i], 1, 1, rng) for i in range(n - 1)]

    @property
    def stages(self) -> int:
        return self.enc.levels - 1

    def check_input(self, shape) -> None:
        B, C, H, W = shape
        div = 2 ** (self.enc.levels - 1)
        if C != self.enc.in_channels:
            raise ShapeError(f"expected {self.enc.in_channels} input channel(s), got {C}")
        if H % div or W % div:
            raise ShapeError(f"input {H}x{W} must be divisible by {div}")
        coarsest = min(H, W) // 2 ** (self.stages - 1)
        if self.filter.kind in ("lowpass", "highpass") and coarsest < self.filter.gamma:
            raise ShapeError(
                f"input {H}x{W} too small: coarsest decoder stage {coarsest} < gamma={self.filter.gamma}")

    def encode(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for i, block in enumerate(self.encoder):
            if i:
                h = T.maxpool2(h)
            h = block(h)
            feats.append(h)
        return feats

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        x = T.as_tensor(x)
        self.check_input(x.shape)
        B, _, H, W = x.shape
        E = self.encode(x)
        fused = [bf(E[i], E[i + 1]) for i, bf in enumerate(self.bfmf)]

        EA = []
        for i, att in enumerate(self.attention):
            y = fused[i][0]
            if i == 0:
                ys_prev = T.expand(self.gate_seed, y.shape)
            else:
                ys_prev = fused[i - 1][1]
            EA.append(att(E[i], ys_prev, y))

        x_d = E[-1]
        logits = None
        phi_masks: list[Tensor] = [None] * self.stages
        for i in reversed(range(self.stages)):
            x_d = self.decoder[i](EA[i], x_d)
            x_phi = self.phi[i](x_d)
            phi_masks[i] = x_phi
            x_rfa = self.rfa[i](x_phi, x_d, self.filter)
            s = self.head[i](x_rfa)
            if s.shape[2:] != (H, W):
                s = T.resize_bilinear(s, (H, W))
            logits = s if logits is None else T.add(logits, s)
        return T.sigmoid(logits), phi_masks
