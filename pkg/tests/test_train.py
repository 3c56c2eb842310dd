import math

import numpy as np
import pytest

from phiseg import data as D
from phiseg import tensor as T
from phiseg import train as TR
from phiseg.config import TrainConfig
from phiseg.tensor import Tensor

TINY = dict(channels=(4, 8), epochs=2, batch_size=4)


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


# ---------------------------------------------------------------- optimizer

def test_adam_zero_gradient_is_a_no_op():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    TR.adam_step([("p", p)], TR.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -7.0, 1e-3])
    TR.adam_step([("p", p)], TR.AdamState(), lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -1.99, 2.99], atol=1e-7)


def test_adam_minimizes_square():
    x = Tensor(np.array([3.0]), requires_grad=True)
    state = TR.AdamState()
    for _ in range(100):
        x.grad = None
        T.square(x).backward()
        TR.adam_step([("x", x)], state, lr=0.1)
    assert abs(x.data[0]) < 0.05 and state.step == 100


def test_adam_rejects_non_finite():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([0.0, np.nan])
    with pytest.raises(TR.TrainingDiverged, match="p"):
        TR.adam_step([("p", p)], TR.AdamState(), lr=0.1)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert TR.clip_grad_norm([a, b], 1.0) == 5.0
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    assert TR.clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


# ---------------------------------------------------------------- schedule

def test_cosine_schedule():
    lr = lambda e: TR.cosine_lr(e, 1e-4, 25, 1e-7)
    assert lr(0) == 1e-4
    assert abs(lr(25) - 1e-4) < 1e-18  # restart
    assert abs(lr(12.5) - (1e-4 + 1e-7) / 2) < 1e-18
    assert abs(TR.cosine_lr(24, 1e-4, 25, 1e-7) - (1e-7 + 0.5 * (1e-4 - 1e-7) * (1 + math.cos(math.pi * 24 / 25)))) < 1e-18
    seq = [lr(e) for e in range(25)]
    assert all(a > b for a, b in zip(seq, seq[1:])) and min(seq) >= 1e-7
    with pytest.raises(ValueError):
        lr(-1)


# ---------------------------------------------------------------- checkpoints

def trained_checkpoint():
    model = TR.build_model(tiny_cfg())
    state = TR.AdamState()
    pred, phis = model(Tensor(np.random.default_rng(0).random((2, 1, 16, 16))))
    T.sum_(pred).backward()
    TR.adam_step(list(model.named_parameters()), state, 1e-3)
    return TR.snapshot(model, state, tiny_cfg(), 3, 0.25)


def test_checkpoint_bytes_roundtrip(tmp_path):
    ck = trained_checkpoint()
    ck.save(tmp_path / "a.ckpt")
    again = TR.Checkpoint.load(tmp_path / "a.ckpt")
    again.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert again.epoch == 3 and again.best_val_loss == 0.25 and again.config == tiny_cfg()
    model, state = TR.restore(again)
    assert state.step == 1
    for (n, a), (m, b) in zip(TR.model_records(model), ck.params):
        assert n == m and np.array_equal(a, b)
    assert ck.to_bytes().startswith(b"PHISEG01")


def test_checkpoint_errors():
    ck = trained_checkpoint()
    data = ck.to_bytes()
    with pytest.raises(TR.CheckpointError, match="magic .* at byte 0"):
        TR.Checkpoint.from_bytes(b"XHISEG01" + data[8:])
    with pytest.raises(TR.CheckpointError, match="truncated checkpoint reading .* at byte"):
        TR.Checkpoint.from_bytes(data[:-3])
    with pytest.raises(TR.CheckpointError, match="trailing bytes"):
        TR.Checkpoint.from_bytes(data + b"\0")

    name, arr = ck.params[0]
    bad = TR.Checkpoint(ck.config, [(name, arr[None])] + ck.params[1:], ck.adam, 0, 0.0)
    with pytest.raises(TR.CheckpointError, match=f"shape mismatch for parameter {name}"):
        TR.restore(bad)
    missing = TR.Checkpoint(ck.config, ck.params[1:], ck.adam, 0, 0.0)
    with pytest.raises(TR.CheckpointError, match=f"lacks parameter {name}"):
        TR.restore(missing)


# ---------------------------------------------------------------- training loop

def read_history(path):
    lines = path.read_text().splitlines()
    assert lines[0] == TR.HISTORY_HEADER
    return [list(map(float, l.split(","))) for l in lines[1:]]


def test_zero_epochs_gives_untrained_checkpoint(tmp_path, small_dataset):
    res = TR.train_loop(tiny_cfg(epochs=0), small_dataset, tmp_path)
    assert read_history(tmp_path / "history.csv") == []
    ck = TR.Checkpoint.load(tmp_path / "best.ckpt")
    assert ck.epoch == 0 and ck.best_val_loss == math.inf
    fresh = TR.build_model(tiny_cfg())
    for (n, a), (_, b) in zip(TR.model_records(fresh), ck.params):
        assert np.array_equal(a, b), n
    assert res.history == []


def test_training_writes_outputs_and_keeps_best(tmp_path, small_dataset):
    res = TR.train_loop(tiny_cfg(epochs=3), small_dataset, tmp_path)
    rows = read_history(tmp_path / "history.csv")
    assert [r[0] for r in rows] == [0, 1, 2]
    assert all(math.isfinite(v) for r in rows for v in r)
    ck = TR.Checkpoint.load(tmp_path / "best.ckpt")
    assert ck.best_val_loss == min(r[3] for r in rows)
    assert ck.epoch == 1 + min(range(3), key=lambda i: rows[i][3])
    assert res.best.to_bytes() == ck.to_bytes()


def test_training_is_reproducible(tmp_path, small_dataset):
    for name in ("a", "b"):
        TR.train_loop(tiny_cfg(), small_dataset, tmp_path / name)
    for f in ("history.csv", "best.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    TR.train_loop(tiny_cfg(seed=1), small_dataset, tmp_path / "c")
    assert (tmp_path / "c" / "history.csv").read_bytes() != (tmp_path / "a" / "history.csv").read_bytes()


def test_divergence_saves_last_good(tmp_path, small_dataset, monkeypatch):
    real = TR.total_loss
    calls = {"n": 0}
    per_epoch = math.ceil(len(D.load_split(small_dataset, "train")) / 4)

    def flaky(*args):
        calls["n"] += 1
        out = real(*args)
        # poison the second epoch's first training batch (validation also calls in)
        return T.mul(out, math.nan) if calls["n"] == per_epoch + 2 else out

    monkeypatch.setattr(TR, "total_loss", flaky)
    with pytest.raises(TR.TrainingDiverged, match="epoch 1"):
        TR.train_loop(tiny_cfg(epochs=3), small_dataset, tmp_path)
    ck = TR.Checkpoint.load(tmp_path / "last_good.ckpt")
    assert ck.epoch == 1
    assert len(read_history(tmp_path / "history.csv")) == 1


def test_evaluate_and_size_check(small_dataset):
    model = TR.build_model(tiny_cfg())
    test = D.load_split(small_dataset, "train")[:3]
    rows = TR.evaluate(model, test)
    assert [r[0] for r in rows] == [s.id for s in test]
    odd = [D.Sample(np.zeros((1, 24, 24)), np.zeros((1, 24, 24)), "odd")]
    with pytest.raises(T.ShapeError, match="divisible by 16"):
        TR.evaluate(model, odd)
