import numpy as np
import pytest

from phiseg import spectral as S
from phiseg import tensor as T
from phiseg.model import (BFMF, RFA, Attention, DecoderBlock, EncoderSpec, MkC, PhiConditioner,
                          PhiSegNet, reverse_fourier_mask)
from phiseg.tensor import ShapeError, Tensor


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


def small_net(seed=0, channels=(4, 8, 16), kind="lowpass", gamma=3):
    return PhiSegNet(EncoderSpec(list(channels)), S.FilterSpec(kind, gamma), seed=seed)


# ---------------------------------------------------------------- MkC and BFMF

def test_mkc_shapes_and_zero_limit(rng):
    m = MkC(3, 5, rng)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    outs = m(x)
    assert [o.shape for o in outs] == [(2, 5, 8, 8)] * 3
    zero_params(m)
    for o in m(x):
        np.testing.assert_array_equal(o.data, 0.0)


def test_mkc_dilated_branch_impulse_footprint(rng):
    m = MkC(1, 1, rng)
    w = m.k5.conv.weight.data
    w[...] = np.abs(w) + 0.1
    x = np.zeros((1, 1, 21, 21))
    x[0, 0, 10, 10] = 1.0
    with T.no_grad():
        out = T.conv2d(Tensor(x), m.k5.conv.weight, None, padding=m.k5.conv.padding, dilation=2)
    rows, cols = np.nonzero(out.data[0, 0])
    assert (np.ptp(rows) + 1, np.ptp(cols) + 1) == (9, 9)


def test_bfmf_shapes_and_range(rng):
    bf = BFMF(4, 8, 8, rng)
    x, xs = Tensor(rng.standard_normal((2, 4, 8, 8))), Tensor(rng.standard_normal((2, 8, 4, 4)))
    y, ys = bf(x, xs)
    assert y.shape == (2, 4, 8, 8) and ys.shape == (2, 8, 4, 4)
    assert np.all((y.data > 0) & (y.data < 1))
    with pytest.raises(ShapeError):
        bf(x, Tensor(rng.standard_normal((2, 8, 3, 3))))


def test_bfmf_zero_logits_give_half(rng):
    bf = BFMF(4, 8, 8, rng)
    bf.fuse1.weight.data[...] = 0.0
    bf.fuse1.bias.data[...] = 0.0
    y, _ = bf(Tensor(rng.standard_normal((1, 4, 8, 8))), Tensor(rng.standard_normal((1, 8, 4, 4))))
    np.testing.assert_array_equal(y.data, 0.5)


# ---------------------------------------------------------------- attention

def test_attention_gain_between_one_and_two(rng):
    att = Attention(4, 4, rng)
    E = Tensor(rng.standard_normal((2, 4, 8, 8)))
    ys, y = Tensor(rng.random((2, 4, 8, 8))), Tensor(rng.random((2, 4, 8, 8)))
    ratio = att(E, ys, y).data / E.data
    assert np.all((ratio > 1) & (ratio < 2))


@pytest.mark.parametrize("shift,gain", [(-800.0, 1.0), (800.0, 2.0)])
def test_attention_gate_limits(rng, shift, gain):
    att = Attention(4, 4, rng)
    att.bn2.scale.data[...] = 0.0
    att.bn2.shift.data[...] = shift  # saturates the sigmoid to exactly 0 or 1
    E = Tensor(rng.standard_normal((1, 4, 6, 6)))
    out = att(E, Tensor(rng.random((1, 4, 6, 6))), Tensor(rng.random((1, 4, 6, 6))))
    np.testing.assert_array_equal(out.data, gain * E.data)


# ---------------------------------------------------------------- decoder, phi, RFA

def test_decoder_block(rng):
    dec = DecoderBlock(4, 8, 6, rng)
    EA = Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    prev = Tensor(rng.standard_normal((2, 8, 4, 4)), requires_grad=True)
    out = dec(EA, prev)
    assert out.shape == (2, 6, 8, 8)
    T.sum_(T.square(out)).backward()
    assert np.any(EA.grad != 0) and np.any(prev.grad != 0)
    assert dec(EA, Tensor(rng.standard_normal((2, 8, 8, 8)))).shape == (2, 6, 8, 8)
    with pytest.raises(ShapeError):
        dec(EA, Tensor(rng.standard_normal((2, 8, 3, 3))))
    zero_params(dec)
    np.testing.assert_array_equal(dec(EA, prev).data, 0.0)


def test_phi_conditioner(rng):
    phi = PhiConditioner(5, rng)
    x = Tensor(rng.standard_normal((2, 5, 4, 4)))
    out = phi(x)
    assert out.shape == (2, 1, 4, 4) and np.all((out.data > 0) & (out.data < 1))
    zero_params(phi)
    np.testing.assert_array_equal(phi(x).data, 0.5)


def test_rfa_limits(rng):
    block = RFA(3, rng)
    block.conv.bias.data[...] = rng.standard_normal(3)
    x_d = Tensor(rng.standard_normal((2, 3, 8, 8)))
    ones, zeros = Tensor(np.ones((2, 1, 8, 8))), Tensor(np.zeros((2, 1, 8, 8)))
    for kind in S.FILTER_KINDS:
        out = block(ones, x_d, S.FilterSpec(kind, 3)).data
        np.testing.assert_allclose(out, np.broadcast_to(block.conv.bias.data[None, :, None, None], out.shape),
                                   atol=1e-12)
    plain = block.conv(x_d).data
    assert np.max(np.abs(block(zeros, x_d, S.FilterSpec("none", 3)).data - plain)) < 1e-12


def test_reverse_mask_nonnegative_and_full_band(rng):
    x_phi = Tensor(rng.random((2, 1, 8, 8)))
    for kind in S.FILTER_KINDS:
        assert np.all(reverse_fourier_mask(x_phi, S.FilterSpec(kind, 3)).data >= 0)
    full = reverse_fourier_mask(x_phi, S.FilterSpec("lowpass", 8, gamma_square_weight=False)).data
    np.testing.assert_allclose(full, 1 - x_phi.data, atol=1e-9)


def test_rfa_rejects_stage_smaller_than_gamma(rng):
    with pytest.raises(ShapeError):
        RFA(2, rng)(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 2, 2, 2))), S.FilterSpec("lowpass", 3))


# ---------------------------------------------------------------- full network

def test_forward_shapes_and_ranges(rng):
    net = small_net()
    x = Tensor(rng.random((2, 1, 16, 16)))
    pred, phis = net(x)
    assert pred.shape == (2, 1, 16, 16)
    assert np.all((pred.data > 0) & (pred.data < 1))
    assert [p.shape for p in phis] == [(2, 1, 16, 16), (2, 1, 8, 8)]


def test_default_network_shape_table(rng):
    net = PhiSegNet()
    x = Tensor(rng.random((1, 1, 32, 32)))
    with T.no_grad():
        E = net.encode(x)
        pred, phis = net(x)
    assert [e.shape for e in E] == [(1, c, 32 >> i, 32 >> i) for i, c in enumerate([16, 32, 64, 128, 256])]
    assert len(phis) == 4 == net.stages
    assert [p.shape[2] for p in phis] == [32, 16, 8, 4]
    assert pred.shape == (1, 1, 32, 32)


def test_input_size_errors(rng):
    net = small_net()
    with pytest.raises(ShapeError, match="divisible by 4"):
        net(Tensor(rng.random((1, 1, 18, 16))))
    with pytest.raises(ShapeError):
        net(Tensor(rng.random((1, 2, 16, 16))))
    with pytest.raises(ShapeError, match="gamma"):
        small_net(gamma=5)(Tensor(rng.random((1, 1, 8, 8))))


def test_eval_is_deterministic_and_pure(rng):
    net = small_net()
    x = Tensor(rng.random((2, 1, 16, 16)))
    net(x)  # one train-mode pass moves the running stats
    net.eval()
    before = {n: b.copy() for n, b in net.named_buffers()}
    params = {n: p.data.copy() for n, p in net.named_parameters()}
    a, _ = net(x)
    b, _ = net(x)
    assert np.array_equal(a.data, b.data)
    for n, buf in net.named_buffers():
        assert np.array_equal(buf, before[n])
    for n, p in net.named_parameters():
        assert np.array_equal(p.data, params[n])


def test_parameter_count_depends_only_on_spec():
    assert small_net(seed=1).num_parameters() == small_net(seed=2).num_parameters()
    assert PhiSegNet(seed=0).num_parameters() == PhiSegNet(seed=5).num_parameters()
    assert small_net(channels=(4, 8)).num_parameters() < small_net().num_parameters()


def test_every_used_parameter_gets_a_gradient(rng):
    net = small_net()
    pred, phis = net(Tensor(rng.random((2, 1, 16, 16))))
    T.sum_(pred).backward()
    # only the coarsest BFMF's y_s branch has no consumer
    unused = {n for n, p in net.named_parameters() if p.grad is None}
    assert unused and all(n.startswith("bfmf.1.") for n in unused)
