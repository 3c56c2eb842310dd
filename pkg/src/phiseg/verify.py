"""Self-checks: finite-difference gradients, Fourier identities, filter and
unwrap properties, attention limits and metric oracles.

Each check yields a :class:`Check` with the measured value and the tolerance
it was held to, so a report always states what "pass" meant.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import losses as L
from . import metrics as MT
from . import spectral as S
from . import tensor as T
from .model import RFA, EncoderSpec, PhiSegNet, reverse_fourier_mask
from .tensor import Tensor

SUITES = ("grad", "fourier", "metrics")
FD_STEP = 1e-5
OP_TOL = 1e-4
MODEL_TOL = 1e-3
FOURIER_TOL = 1e-9
# gradient norms below this are indistinguishable from difference-quotient
# roundoff (~eps * |loss| / h); e.g. conv biases feeding a train-mode batchnorm
GRAD_FLOOR = 1e-6


@dataclass
class Check:
    suite: str
    name: str
    value: float
    tol: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.suite}/{self.name}  value={self.value:.3e}  "
                f"tol={self.tol:.1e}  ({self.seconds:.2f}s)")


def _below(suite, name, value, tol, seconds=0.0) -> Check:
    value = float(value)
    return Check(suite, name, value, tol, bool(value < tol), seconds)


def _exact(suite, name, mismatches, seconds=0.0) -> Check:
    # tolerance 0: the value is a count of mismatching entries
    return Check(suite, name, float(mismatches), 0.0, mismatches == 0, seconds)


# ---------------------------------------------------------------- gradients

def rel_error(a: np.ndarray, b: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / max(na, nb, floor))


def gradcheck(fn: Callable[[], Tensor], inputs: list[Tensor], h: float = FD_STEP,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst per-tensor relative error between backprop and central differences.

    ``fn`` rebuilds the scalar loss from the current values of ``inputs``.
    Tensors larger than ``max_entries`` are probed on a random subset.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    T.backward(fn())
    worst = 0.0
    for t in inputs:
        # leaves outside the graph never receive a grad; their true gradient is 0
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        assert np.shares_memory(flat, t.data)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        with T.no_grad():
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
                numeric[j] = (up - down) / (2 * h)
        worst = max(worst, rel_error(analytic[idx], numeric))
    return worst


def _leaf(rng, shape, lo=None, hi=None, away_from_zero=0.0) -> Tensor:
    if lo is not None:
        a = rng.uniform(lo, hi, size=shape)
    else:
        a = rng.standard_normal(shape)
    if away_from_zero:
        a = np.where(np.abs(a) < away_from_zero, np.sign(a + 1e-300) * away_from_zero, a)
    return Tensor(np.ascontiguousarray(a), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar probe sum(out * w) with fixed random weights."""
    return T.sum_(T.mul_const(out, w))


def _op_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, list[Tensor]]]:
    """(name, loss builder, inputs) for every differentiable op."""

    def probe(name, make, *inputs):
        with T.no_grad():
            shape = make().shape
        w = rng.standard_normal(shape)
        return name, (lambda: _weighted(make(), w)), list(inputs)

    a, b = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (2, 3, 4, 4))
    yield probe("add", lambda: T.add(a, b), a, b)
    yield probe("sub", lambda: T.sub(a, b), a, b)
    yield probe("mul", lambda: T.mul(a, b), a, b)
    s = _leaf(rng, (1,), 0.5, 1.5)
    yield probe("mul_scalar_tensor", lambda: T.mul(a, s), a, s)
    d = _leaf(rng, (2, 3, 4, 4), 0.5, 2.0)
    yield probe("div", lambda: T.div(a, d), a, d)
    c = rng.standard_normal(a.shape)
    yield probe("mul_const", lambda: T.mul_const(a, c), a)
    yield probe("square", lambda: T.square(a), a)
    p = _leaf(rng, (2, 3, 4, 4), 0.2, 2.0)
    yield probe("sqrt", lambda: T.sqrt(p), p)
    z = _leaf(rng, (2, 3, 4, 4), away_from_zero=0.05)
    yield probe("absolute", lambda: T.absolute(z), z)
    yield probe("leaky_relu", lambda: T.leaky_relu(z, 0.01), z)
    yield probe("sigmoid", lambda: T.sigmoid(a), a)
    yield probe("sum_axis", lambda: T.sum_(a, axis=(1, 2)), a)
    yield probe("mean", lambda: T.mean(a), a)
    yield probe("reshape", lambda: T.reshape(a, (6, 16)), a)
    e = _leaf(rng, (2, 1, 4, 4))
    yield probe("expand", lambda: T.expand(e, (2, 3, 4, 4)), e)
    yield probe("concat_channels", lambda: T.concat_channels(a, e), a, e)

    x = _leaf(rng, (2, 3, 6, 6))
    w3, b3 = _leaf(rng, (4, 3, 3, 3)), _leaf(rng, (4,))
    yield probe("conv2d_3x3", lambda: T.conv2d(x, w3, b3, padding=1), x, w3, b3)
    w1 = _leaf(rng, (4, 3, 1, 1))
    yield probe("conv2d_1x1", lambda: T.conv2d(x, w1, b3), x, w1, b3)
    yield probe("conv2d_dilated", lambda: T.conv2d(x, w3, b3, padding=2, dilation=2), x, w3, b3)
    yield probe("conv2d_stride2", lambda: T.conv2d(x, w3, None, stride=2, padding=1), x, w3)

    g, sh = _leaf(rng, (3,), 0.5, 1.5), _leaf(rng, (3,))
    rm, rv = np.zeros(3), np.ones(3)
    yield probe("batchnorm_train",
                lambda: T.batchnorm2d(x, g, sh, rm.copy(), rv.copy(), training=True), x, g, sh)
    rm2, rv2 = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    yield probe("batchnorm_eval",
                lambda: T.batchnorm2d(x, g, sh, rm2, rv2, training=False), x, g, sh)
    yield probe("maxpool2", lambda: T.maxpool2(x), x)
    yield probe("upsample_x2", lambda: T.upsample_bilinear(x, 2.0), x)
    yield probe("resize_bilinear", lambda: T.resize_bilinear(x, (4, 9)), x)

    img = _leaf(rng, (2, 1, 8, 8), 0.0, 1.0)
    yield probe("dft2_real", lambda: S.dft2(img).re, img)
    yield probe("dft2_imag", lambda: S.dft2(img).im, img)
    odd = _leaf(rng, (1, 1, 6, 10), 0.0, 1.0)
    yield probe("dft2_direct_path", lambda: S.dft2(odd).im, odd)
    re, im = _leaf(rng, (2, 1, 8, 8)), _leaf(rng, (2, 1, 8, 8))
    yield probe("idft2", lambda: S.idft2(S.ComplexField(re, im))[0], re, im)
    yield probe("magnitude", lambda: S.magnitude(S.ComplexField(re, im)), re, im)
    yield probe("phase", lambda: S.phase(S.ComplexField(re, im)), re, im)
    ph = _leaf(rng, (2, 1, 8, 8), -3.0, 3.0)
    yield probe("unwrap_row", lambda: S.unwrap_axis(ph, "row"), ph)
    yield probe("unwrap_col", lambda: S.unwrap_axis(ph, "col"), ph)
    for kind in S.FILTER_KINDS:
        spec = S.FilterSpec(kind, 3)
        yield probe(f"filter_{kind}", lambda spec=spec: S.apply_filter(S.dft2(img), spec).re, img)
    yield probe("reverse_fourier_mask",
                lambda: reverse_fourier_mask(img, S.FilterSpec("lowpass", 3)), img)

    pred = _leaf(rng, (2, 1, 8, 8), 0.05, 0.95)
    gt = Tensor((rng.random((2, 1, 8, 8)) < 0.4).astype(np.float64))
    yield "iou_loss", (lambda: L.iou_loss(pred, gt)), [pred]
    m8, m4 = _leaf(rng, (2, 1, 8, 8), 0.05, 0.95), _leaf(rng, (2, 1, 4, 4), 0.05, 0.95)
    yield "phase_loss", (lambda: L.phase_loss([m8, m4], gt)), [m8, m4]


def tiny_model(seed: int = 0) -> PhiSegNet:
    """Two-level model used for the end-to-end gradient check."""
    return PhiSegNet(EncoderSpec([4, 8]), S.FilterSpec("lowpass", 3), seed=seed)


def end_to_end_case(seed: int = 0):
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    x = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)), requires_grad=True)
    gt = Tensor((rng.random((2, 1, 16, 16)) < 0.3).astype(np.float64))

    def loss():
        pred, phis = model(x)
        return L.total_loss(phis, pred, gt, L.LossWeights(0.01, 1.0))

    return loss, [x] + model.parameters()


@contextlib.contextmanager
def perturbed_gradients(scale: float = 1.01):
    """Test hook: every op built in the block reports a slightly wrong gradient."""
    original = T._node

    def faulty(data, parents, backward_fn):
        def bw(g):
            return tuple(None if r is None else r * scale for r in backward_fn(g))
        return original(data, parents, bw)

    T._node = faulty
    try:
        yield
    finally:
        T._node = original


def grad_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for name, fn, inputs in _op_cases(rng):
        t0 = time.perf_counter()
        err = gradcheck(fn, inputs, rng=rng)
        checks.append(_below("grad", name, err, OP_TOL, time.perf_counter() - t0))
    t0 = time.perf_counter()
    fn, inputs = end_to_end_case(seed)
    err = gradcheck(fn, inputs, max_entries=6, rng=rng)
    checks.append(_below("grad", "end_to_end_total_loss", err, MODEL_TOL, time.perf_counter() - t0))
    return checks


# ---------------------------------------------------------------- Fourier

def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def shift_theorem(x: np.ndarray, dy: int, dx: int) -> tuple[float, float]:
    """Max magnitude deviation and max wrapped phase-ramp error (where |X| > 1e-6)
    between the spectrum of a circularly shifted image and the predicted one."""
    M, N = x.shape[-2:]
    X = S.fourier2(x)
    Xs = S.fourier2(np.roll(x, (dy, dx), axis=(-2, -1)))
    mag_dev = float(np.max(np.abs(np.abs(Xs) - np.abs(X))))
    k = np.arange(M)[:, None]
    l = np.arange(N)[None, :]
    ramp = -S.TWO_PI * (k * dy / M + l * dx / N)
    err = S.wrap(np.angle(Xs) - np.angle(X) - ramp)
    sel = np.abs(X) > 1e-6
    return mag_dev, float(np.max(np.abs(err[sel]))) if sel.any() else 0.0


def unwrap_oracle(row: np.ndarray) -> np.ndarray:
    """Sequential correction: each step's raw difference is pulled into
    (-pi, pi] by an integer number of turns, accumulated along the line."""
    out = np.empty_like(row)
    out[0] = row[0]
    turns = 0
    for i in range(1, row.size):
        d = row[i] - row[i - 1]
        j = 0
        while d - j * S.TWO_PI > math.pi:
            j += 1
        while d - j * S.TWO_PI <= -math.pi:
            j -= 1
        turns += j
        out[i] = row[i] - turns * S.TWO_PI
    return out


def fourier_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for n in (16, 64):
        x = rng.uniform(0, 1, (n, n))

        def roundtrip():
            real, imag = S.idft2(S.dft2(x))
            return max(np.max(np.abs(real.data - x)), np.max(np.abs(imag)))

        err, dt = _timed(roundtrip)
        checks.append(_below("fourier", f"roundtrip_{n}x{n}", err, FOURIER_TOL, dt))

        X = S.fourier2(x)
        energy = np.sum(x * x)
        parseval = abs(energy - np.sum(np.abs(X) ** 2) / (n * n)) / energy
        checks.append(_below("fourier", f"parseval_rel_{n}x{n}", parseval, FOURIER_TOL))
        mirror = np.conj(X[(-np.arange(n)) % n][:, (-np.arange(n)) % n])
        checks.append(_below("fourier", f"conjugate_symmetry_{n}x{n}",
                             np.max(np.abs(X - mirror)), FOURIER_TOL))
        (mag_dev, ramp_err), dt = _timed(lambda: shift_theorem(x, 3, -5))
        checks.append(_below("fourier", f"shift_magnitude_{n}x{n}", mag_dev, FOURIER_TOL, dt))
        checks.append(_below("fourier", f"shift_phase_ramp_{n}x{n}", ramp_err, FOURIER_TOL, dt))

    def fft_vs_direct():
        worst = 0.0
        sizes = [(8, 8), (16, 16), (32, 32), (64, 64), (16, 32)]
        for i in range(100):
            shape = sizes[i % len(sizes)]
            a = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            inverse = bool(i % 2)
            fast = S.fourier2(a, inverse=inverse, method="fft")
            slow = S.fourier2(a, inverse=inverse, method="direct")
            worst = max(worst, float(np.max(np.abs(fast - slow))))
        return worst

    err, dt = _timed(fft_vs_direct)
    checks.append(_below("fourier", "fft_vs_direct_100", err, FOURIER_TOL, dt))

    checks.extend(unwrap_checks(rng))
    checks.extend(filter_checks(rng))
    checks.extend(rfa_checks(rng))
    return checks


def unwrap_checks(rng: np.random.Generator) -> list[Check]:
    rows = rng.uniform(-math.pi, math.pi, (100, 1, 32))
    mismatches = 0
    bad_steps = 0
    for r in rows:
        got = S.unwrap_axis(r, "row").data
        mismatches += int(np.sum(got[0] != unwrap_oracle(r[0])))
        d = np.diff(got[0])
        bad_steps += int(np.sum((d <= -math.pi) | (d > math.pi)))
    return [_exact("fourier", "unwrap_vs_scalar_oracle", mismatches),
            _exact("fourier", "unwrap_steps_in_range", bad_steps)]


def filter_checks(rng: np.random.Generator) -> list[Check]:
    x = rng.uniform(0, 1, (1, 1, 16, 16))
    X = S.dft2(x)
    lpf = S.FilterSpec("lowpass", 3, gamma_square_weight=False)
    hpf = S.FilterSpec("highpass", 3, gamma_square_weight=False)
    once = S.apply_filter(X, lpf)
    twice = S.apply_filter(once, lpf)
    idem = int(np.sum(once.re.data != twice.re.data) + np.sum(once.im.data != twice.im.data))
    lo, hi = S.apply_filter(X, lpf), S.apply_filter(X, hpf)
    comp = max(np.max(np.abs(lo.re.data + hi.re.data - X.re.data)),
               np.max(np.abs(lo.im.data + hi.im.data - X.im.data)))
    dc_only, _ = S.idft2(S.apply_filter(X, S.FilterSpec("lowpass", 1, False)))
    flat = np.max(np.abs(dc_only.data - x.mean()))

    gamma = 3.0
    G = S.leaky_weights(16, 16, gamma)
    fk = S.centered_frequencies(16)
    origin = (int(np.flatnonzero(fk == 0)[0]),) * 2
    corner = (int(np.flatnonzero(fk == -8)[0]),) * 2
    corner_expected = 1.5 ** (-gamma)
    return [
        _exact("fourier", "lowpass_idempotent", idem),
        _below("fourier", "lowpass_highpass_complement", comp, 1e-12),
        _below("fourier", "gamma1_constant_mean", flat, 1e-12),
        _exact("fourier", "leaky_origin_is_one", int(G[origin] != 1.0)),
        _exact("fourier", "leaky_corner_value", int(G[corner] != corner_expected)),
    ]


def rfa_checks(rng: np.random.Generator) -> list[Check]:
    c = 4
    block = RFA(c, rng)
    block.conv.bias.data[:] = rng.standard_normal(c)
    x_d = Tensor(rng.standard_normal((2, c, 8, 8)))
    with T.no_grad():
        out_one = block(Tensor(np.ones((2, 1, 8, 8))), x_d, S.FilterSpec("lowpass", 3)).data
        bias_only = T.conv2d(Tensor(np.zeros_like(x_d.data)), block.conv.weight,
                             block.conv.bias, padding=1).data
        out_zero = block(Tensor(np.zeros((2, 1, 8, 8))), x_d, S.FilterSpec("none", 3)).data
        plain = block.conv(x_d).data
    return [
        _below("fourier", "rfa_phi_one_bias_only", np.max(np.abs(out_one - bias_only)), 1e-12),
        _below("fourier", "rfa_phi_zero_plain_conv", np.max(np.abs(out_zero - plain)), 1e-12),
    ]


# ---------------------------------------------------------------- metrics

def assd_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Pixel-loop ASSD: explicit neighbour scan for boundaries, exhaustive
    nearest-point search, exactly rounded sum."""
    H, W = a.shape

    def edge_points(m):
        pts = []
        for i in range(H):
            for j in range(W):
                if not m[i, j]:
                    continue
                for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ii, jj = i + di, j + dj
                    if not (0 <= ii < H and 0 <= jj < W) or not m[ii, jj]:
                        pts.append((i, j))
                        break
        return pts

    pa, pb = edge_points(a), edge_points(b)
    if not pa or not pb:
        return math.sqrt(H * H + W * W)
    dists = [min(math.sqrt((i - k) ** 2 + (j - l) ** 2) for k, l in pb) for i, j in pa]
    dists += [min(math.sqrt((i - k) ** 2 + (j - l) ** 2) for k, l in pa) for i, j in pb]
    return math.fsum(dists) / len(dists)


def metrics_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    mism = 0
    dice_gap = f1_gap = 0.0
    t0 = time.perf_counter()
    for _ in range(50):
        a = rng.random((16, 16)) < rng.uniform(0.1, 0.6)
        b = rng.random((16, 16)) < rng.uniform(0.1, 0.6)
        mism += int(MT.assd(a, b) != assd_oracle(a, b))
        r = MT.metrics(a, b)
        dice_gap = max(dice_gap, abs(r.dice - 2 * r.iou / (1 + r.iou)))
        if r.pre + r.rec:
            f1_gap = max(f1_gap, abs(r.f1 - 2 * r.pre * r.rec / (r.pre + r.rec)))
    dt = time.perf_counter() - t0

    pred = np.zeros((4, 4), dtype=np.uint8)
    gt = np.zeros((4, 4), dtype=np.uint8)
    pred[0, 0:3] = 1  # TP, TP, FP
    gt[0, 0:2] = 1
    gt[1, 0] = 1  # FN
    r = MT.metrics(pred, gt)
    expected = MT.MetricsReport(iou=2 / 4, dice=4 / 6, acc=14 / 16, pre=2 / 3, rec=2 / 3,
                                f1=4 / 6, assd=r.assd)
    conf_ok = MT.confusion(pred, gt) == (2, 1, 1, 12) and r == expected
    return [
        _exact("metrics", "assd_vs_bruteforce_50", mism, dt),
        _below("metrics", "dice_iou_identity", dice_gap, 1e-12),
        _below("metrics", "f1_harmonic_identity", f1_gap, 1e-12),
        _exact("metrics", "confusion_example", int(not conf_ok)),
    ]


# ---------------------------------------------------------------- driver

def run(suite: str = "all", seed: int = 0) -> list[Check]:
    if suite not in SUITES + ("all",):
        raise ValueError(f"unknown suite {suite!r}")
    chosen = SUITES if suite == "all" else (suite,)
    table = {"grad": grad_suite, "fourier": fourier_suite, "metrics": metrics_suite}
    checks = []
    for name in chosen:
        checks.extend(table[name](seed))
    return checks
