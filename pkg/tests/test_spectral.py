import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phiseg import spectral as S
from phiseg import tensor as T
from phiseg.spectral import ComplexField, FilterError, FilterSpec
from phiseg.tensor import Tensor
from phiseg.verify import gradcheck, shift_theorem, unwrap_oracle


# ---------------------------------------------------------------- transforms

@pytest.mark.parametrize("shape", [(8, 8), (16, 16), (64, 64), (6, 10), (5, 7), (1, 1), (16, 12)])
def test_dft_matches_numpy_fft(rng, shape):
    x = rng.standard_normal(shape)
    np.testing.assert_allclose(S.fourier2(x), np.fft.fft2(x), atol=1e-9)
    np.testing.assert_allclose(S.fourier2(x, inverse=True) / x.size, np.fft.ifft2(x), atol=1e-9)


def test_radix2_vs_direct_1d(rng):
    for n in (1, 2, 4, 32, 128):
        a = rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n))
        np.testing.assert_allclose(S.fft_radix2(a), S.dft_direct(a), atol=1e-9)
        np.testing.assert_allclose(S.fft_radix2(a, True), S.dft_direct(a, True), atol=1e-9)


def test_dc_only_and_flat_spectra():
    X = S.dft2(np.full((6, 8), 0.4))
    assert abs(X.re.data[0, 0] - 6 * 8 * 0.4) < 1e-9
    spec = X.to_complex()
    spec[0, 0] = 0
    assert np.max(np.abs(spec)) < 1e-9
    imp = np.zeros((8, 8))
    imp[0, 0] = 1
    np.testing.assert_allclose(S.dft2(imp).to_complex(), 1.0, atol=1e-12)


def test_idft_of_zero_and_roundtrip(rng):
    zero = ComplexField(np.zeros((4, 4)), np.zeros((4, 4)))
    np.testing.assert_array_equal(S.idft2(zero)[0].data, 0.0)
    x = rng.uniform(-1, 1, (16, 16))
    real, imag = S.idft2(S.dft2(x))
    assert np.max(np.abs(real.data - x)) < 1e-9 and np.max(np.abs(imag)) < 1e-9


def test_parseval_direct_sums(rng):
    x = rng.standard_normal((8, 8))
    X = S.dft2(x)
    lhs = sum(v * v for v in x.ravel())
    rhs = sum(a * a + b * b for a, b in zip(X.re.data.ravel(), X.im.data.ravel())) / 64
    assert abs(lhs - rhs) < 1e-9


def test_zero_size_rejected():
    with pytest.raises(ValueError):
        S.dft2(np.zeros((0, 4)))


@settings(max_examples=20, deadline=None)
@given(m=st.integers(1, 12), n=st.integers(1, 12), dy=st.integers(-12, 12), dx=st.integers(-12, 12),
       seed=st.integers(0, 2**16))
def test_shift_theorem_property(m, n, dy, dx, seed):
    x = np.random.default_rng(seed).standard_normal((m, n))
    mag_dev, ramp_err = shift_theorem(x, dy, dx)
    assert mag_dev < 1e-9 and ramp_err < 1e-9


def test_dft_adjoint_gradient(rng):
    x = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
    w1, w2 = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))

    def fn():
        X = S.dft2(x)
        return T.add(T.sum_(T.mul_const(X.re, w1)), T.sum_(T.mul_const(X.im, w2)))

    assert gradcheck(fn, [x]) < 1e-5


# ---------------------------------------------------------------- magnitude and phase

def test_magnitude_and_phase_values():
    X = ComplexField(np.array([3.0, 0.0, 1.0, 0.0, -1.0, -1.0]), np.array([4.0, 0.0, 0.0, 1.0, 0.0, -0.0]))
    np.testing.assert_array_equal(S.magnitude(X).data[:2], [5.0, 0.0])
    ph = S.phase(X).data
    assert ph[2] == 0.0 and ph[3] == math.pi / 2
    assert ph[4] == math.pi and ph[5] == math.pi  # (-pi, pi]: -pi maps to pi


def test_phase_pinned_near_zero_magnitude():
    re = Tensor(np.array([1e-13, 1.0]), requires_grad=True)
    im = Tensor(np.array([1e-13, 1.0]), requires_grad=True)
    ph = S.phase(ComplexField(re, im))
    assert ph.data[0] == 0.0
    T.sum_(ph).backward()
    assert re.grad[0] == 0.0 and im.grad[0] == 0.0
    assert re.grad[1] == -0.5 and im.grad[1] == 0.5


# ---------------------------------------------------------------- unwrap

def test_unwrap_examples():
    np.testing.assert_array_equal(S.unwrap_axis(np.array([[0.0, 0.2, 0.4]])).data, [[0.0, 0.2, 0.4]])
    got = S.unwrap_axis(np.array([[3.0, -3.0]])).data[0]
    assert got[0] == 3.0 and abs(got[1] - (-3.0 + 2 * math.pi)) < 1e-15
    assert abs(got[1] - 3.2832) < 1e-4


def test_unwrap_axes_are_transposes(rng):
    P = rng.uniform(-math.pi, math.pi, (5, 7))
    np.testing.assert_array_equal(S.unwrap_axis(P, "col").data, S.unwrap_axis(P.T, "row").data.T)
    with pytest.raises(ValueError):
        S.unwrap_axis(P, "diagonal")


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40), spread=st.floats(0.5, 30.0))
def test_unwrap_against_scalar_oracle(seed, n, spread):
    row = np.random.default_rng(seed).uniform(-spread, spread, n)
    got = S.unwrap_axis(row[None]).data[0]
    np.testing.assert_array_equal(got, unwrap_oracle(row))
    d = np.diff(got)
    assert np.all((d > -math.pi) & (d <= math.pi))


def test_wrap_of_unwrap_roundtrip(rng):
    P = rng.uniform(-math.pi, math.pi, (10, 32))
    back = S.wrap(S.unwrap_axis(P).data)
    assert np.max(np.abs(back - P)) < 1e-12


def test_unwrap_gradient_is_identity(rng):
    P = Tensor(rng.uniform(-3, 3, (4, 6)), requires_grad=True)
    T.sum_(T.mul_const(S.unwrap_axis(P, "col"), np.arange(24.0).reshape(4, 6))).backward()
    np.testing.assert_array_equal(P.grad, np.arange(24.0).reshape(4, 6))


# ---------------------------------------------------------------- filters

def test_centered_frequencies_match_fftfreq():
    for n in (1, 2, 5, 8, 9, 64):
        expected = np.rint(np.fft.fftfreq(n) * n).astype(int)
        np.testing.assert_array_equal(S.centered_frequencies(n), expected)


def test_lowpass_block_in_shifted_view():
    for M, N, g in [(8, 8, 3), (9, 6, 2), (16, 16, 4), (7, 7, 7)]:
        keep = np.fft.fftshift(S.lowpass_region(M, N, g))
        r0, c0 = M // 2 - g // 2, N // 2 - g // 2
        expected = np.zeros((M, N), dtype=bool)
        expected[r0:r0 + g, c0:c0 + g] = True
        np.testing.assert_array_equal(keep, expected)


def test_full_lowpass_is_identity(rng):
    X = S.dft2(rng.standard_normal((8, 12)))
    Y = S.apply_filter(X, FilterSpec("lowpass", 12, gamma_square_weight=False))
    np.testing.assert_array_equal(Y.to_complex(), X.to_complex())


def test_gamma_one_keeps_mean(rng):
    x = rng.uniform(0, 1, (10, 10))
    for weight in (False, True):
        out, _ = S.idft2(S.apply_filter(S.dft2(x), FilterSpec("lowpass", 1, weight)))
        np.testing.assert_allclose(out.data, x.mean(), atol=1e-12)


def test_gamma_square_weight_scales_band(rng):
    X = S.dft2(rng.standard_normal((8, 8)))
    plain = S.apply_filter(X, FilterSpec("lowpass", 3, False)).to_complex()
    weighted = S.apply_filter(X, FilterSpec("lowpass", 3, True)).to_complex()
    np.testing.assert_allclose(weighted, 9.0 * plain, atol=1e-12)


def test_highpass_complements_lowpass(rng):
    X = S.dft2(rng.standard_normal((16, 16)))
    lo = S.apply_filter(X, FilterSpec("lowpass", 5, False)).to_complex()
    hi = S.apply_filter(X, FilterSpec("highpass", 5, False)).to_complex()
    assert np.max(np.abs(lo + hi - X.to_complex())) < 1e-12
    again = S.apply_filter(S.apply_filter(X, FilterSpec("highpass", 5, False)), FilterSpec("highpass", 5, False))
    np.testing.assert_array_equal(again.to_complex(), hi)


def test_leaky_weights():
    for gamma in (0.5, 1.0, 3.0):
        G = np.fft.fftshift(S.leaky_weights(16, 16, gamma))
        assert G[8, 8] == 1.0
        assert G[0, 0] == 1.5 ** (-gamma)
    assert abs(np.fft.fftshift(S.leaky_weights(16, 16, 3.0))[0, 0] - 8 / 27) < 1e-15
    G = S.leaky_weights(9, 9, 2.0)
    assert np.all((G > 0) & (G <= 1))


def test_filter_errors():
    with pytest.raises(FilterError):
        S.filter_mask(4, 4, FilterSpec("lowpass", 5))
    with pytest.raises(ValueError):
        FilterSpec("bandpass", 3)
    with pytest.raises(ValueError):
        FilterSpec("leaky_lowpass", 0)
    with pytest.raises(ValueError):
        FilterSpec("lowpass", 2.5)
