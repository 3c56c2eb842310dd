"""Adam, cosine annealing, checkpoints, the training loop and evaluation."""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import tensor as T
from .losses import LossWeights, iou_loss, total_loss
from .metrics import MetricsReport, binarize, confusion, metrics
from .model import PhiSegNet

log = logging.getLogger(__name__)

MAGIC = b"PHISEG01"
HISTORY_HEADER = "epoch,lr,train_loss,val_loss,val_iou"


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(named_params, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place. Missing grads count as zero."""
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(epoch: int, lr0: float, t_max: int, eta_min: float) -> float:
    """Cosine annealing restarted every ``t_max`` epochs (epoch t_max is lr0 again)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    phase = (epoch % t_max) / t_max
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * phase))


def clip_grad_norm(params, max_norm: float) -> float:
    sq = sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------- checkpoint format

def _write_records(buf: io.BytesIO, records: list[tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))


@dataclass
class Checkpoint:
    config: C.TrainConfig
    params: list[tuple[str, np.ndarray]]
    adam: list[tuple[str, np.ndarray]]
    epoch: int
    best_val_loss: float

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        text = C.serialize(self.config).encode("utf-8")
        buf.write(struct.pack("<I", len(text)))
        buf.write(text)
        _write_records(buf, self.params)
        _write_records(buf, self.adam)
        buf.write(struct.pack("<Qd", self.epoch, self.best_val_loss))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _Reader(data)
        magic = r.take(len(MAGIC), "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r} at byte 0")
        n = r.unpack("<I", "config length")[0]
        off = r.pos
        try:
            cfg = C.parse(r.take(n, "config").decode("utf-8"))
        except (UnicodeDecodeError, C.ConfigError) as e:
            raise CheckpointError(f"unreadable config echo at byte {off}: {e}") from None
        params = r.records()
        adam = r.records()
        epoch, best = r.unpack("<Qd", "trailer")
        if r.pos != len(data):
            raise CheckpointError(f"trailing bytes after checkpoint end at byte {r.pos}")
        return cls(cfg, params, adam, epoch, best)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def records(self) -> list[tuple[str, np.ndarray]]:
        out = []
        (count,) = self.unpack("<I", "record count")
        for _ in range(count):
            (ln,) = self.unpack("<I", "name length")
            start = self.pos
            try:
                name = self.take(ln, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"invalid record name at byte {start}") from None
            (rank,) = self.unpack("<I", f"rank of {name}")
            dims = self.unpack(f"<{rank}Q", f"shape of {name}") if rank else ()
            size = int(np.prod(dims)) if rank else 1
            payload = self.take(8 * size, f"payload of {name}")
            out.append((name, np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)))
        return out


def model_records(model: PhiSegNet) -> list[tuple[str, np.ndarray]]:
    recs = [(n, p.data) for n, p in model.named_parameters()]
    recs += [(n, b) for n, b in model.named_buffers()]
    return recs


def adam_records(model: PhiSegNet, state: AdamState) -> list[tuple[str, np.ndarray]]:
    recs = [("adam.step", np.array(float(state.step)))]
    for n, _ in model.named_parameters():
        if n in state.m:
            recs.append((f"adam.m.{n}", state.m[n]))
            recs.append((f"adam.v.{n}", state.v[n]))
    return recs


def build_model(cfg: C.TrainConfig) -> PhiSegNet:
    return PhiSegNet(cfg.encoder_spec(), cfg.filter_spec(), seed=cfg.seed, slope=cfg.leaky_slope)


def restore(ckpt: Checkpoint) -> tuple[PhiSegNet, AdamState]:
    """Rebuild the model described by the checkpoint and load its weights."""
    model = build_model(ckpt.config)
    stored = dict(ckpt.params)
    for name, target in model_records(model):
        if name not in stored:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if stored[name].shape != target.shape:
            raise CheckpointError(f"shape mismatch for parameter {name}: "
                                  f"checkpoint {stored[name].shape} vs model {target.shape}")
        target[...] = stored[name]
    expected = {n for n, _ in model_records(model)}
    for name, _ in ckpt.params:
        if name not in expected:
            raise CheckpointError(f"checkpoint has unexpected parameter {name}")
    state = AdamState()
    for name, arr in ckpt.adam:
        if name == "adam.step":
            state.step = int(arr)
        elif name.startswith("adam.m."):
            state.m[name[7:]] = arr.copy()
        elif name.startswith("adam.v."):
            state.v[name[7:]] = arr.copy()
    return model, state


def snapshot(model, state, cfg, epoch, best) -> Checkpoint:
    return Checkpoint(cfg, [(n, a.copy()) for n, a in model_records(model)],
                      [(n, a.copy()) for n, a in adam_records(model, state)], epoch, best)


# ---------------------------------------------------------------- loop

def batches(samples, size):
    for i in range(0, len(samples), size):
        yield samples[i:i + size]


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class Validation:
    seg_loss: float  # mean soft-IoU loss per batch; drives checkpoint selection
    total_loss: float
    iou: float  # mean thresholded IoU per sample


def validate(model: PhiSegNet, samples, w: LossWeights, batch_size: int) -> Validation:
    """Score ``samples`` in eval mode, leaving the model in train mode."""
    if not samples:
        return Validation(math.nan, math.nan, math.nan)
    model.eval()
    seg, tot, ious = [], [], []
    with T.no_grad():
        for chunk in batches(samples, batch_size):
            x, y = D.stack(chunk)
            pred, phis = model(T.Tensor(x))
            gt = T.Tensor(y)
            seg.append(iou_loss(pred, gt).item())
            tot.append(total_loss(phis, pred, gt, w).item())
            for p, g in zip(pred.data, y):
                tp, fp, fn, _ = confusion(binarize(p), g)
                ious.append(tp / (tp + fp + fn) if tp + fp + fn else 1.0)
    model.train()
    return Validation(float(np.mean(seg)), float(np.mean(tot)), float(np.mean(ious)))


@dataclass
class TrainResult:
    history: list[str]
    best: Checkpoint
    model: PhiSegNet


def train_loop(cfg: C.TrainConfig, data_root, out_dir=None, progress=None) -> TrainResult:
    """Train on ``data_root``'s train split, keep the weights with the lowest
    validation segmentation loss (the phase term is left out of selection).

    Writes ``best.ckpt`` and ``history.csv`` into ``out_dir`` when given. On
    divergence ``last_good.ckpt`` is written and TrainingDiverged re-raised.
    """
    train_set = D.load_split(data_root, "train")
    val_set = D.load_split(data_root, "val")
    if not train_set:
        raise D.DataFormatError(f"{data_root}: empty train split")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg)
    model.train()
    w = cfg.loss_weights()
    state = AdamState()
    named = list(model.named_parameters())
    params = [p for _, p in named]
    history: list[str] = []
    best = snapshot(model, state, cfg, 0, math.inf)
    last_good = best

    def flush(save_best: bool):
        if out is not None:
            if save_best:
                best.save(out / "best.ckpt")
            (out / "history.csv").write_text("\n".join([HISTORY_HEADER] + history) + "\n")

    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.lr0, cfg.t_max, cfg.eta_min)
            rng = np.random.default_rng([cfg.seed, epoch, 1])
            order = rng.permutation(len(train_set))
            epoch_losses = []
            for idx in batches(order, cfg.batch_size):
                chunk = [train_set[i] for i in idx]
                if cfg.augment:
                    chunk = [D.augment(s, rng, max_shift=cfg.max_shift) for s in chunk]
                if cfg.multiscale:
                    scale = D.draw_scale(rng, cfg.scales)
                    chunk = [D.multiscale(s, scale) for s in chunk]
                x, y = D.stack(chunk)
                pred, phis = model(T.Tensor(x))
                loss = total_loss(phis, pred, T.Tensor(y), w)
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                model.zero_grad()
                loss.backward()
                clip_grad_norm(params, cfg.grad_clip)
                adam_step(named, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
                epoch_losses.append(loss.item())
            val = validate(model, val_set, w, cfg.batch_size)
            val_loss = val.seg_loss
            train_loss = float(np.mean(epoch_losses))
            history.append(",".join([str(epoch), _fmt(lr), _fmt(train_loss), _fmt(val_loss), _fmt(val.iou)]))
            if progress:
                progress(f"epoch {epoch} lr={lr:.3g} train={train_loss:.4f} val_seg={val_loss:.4f} "
                         f"val_total={val.total_loss:.4f} val_iou={val.iou:.4f}")
            last_good = snapshot(model, state, cfg, epoch + 1, min(best.best_val_loss, val_loss))
            improved = val_loss < best.best_val_loss
            if improved:
                best = snapshot(model, state, cfg, epoch + 1, val_loss)
            flush(improved)
    except TrainingDiverged:
        if out is not None:
            last_good.save(out / "last_good.ckpt")
            (out / "history.csv").write_text("\n".join([HISTORY_HEADER] + history) + "\n")
        raise
    flush(cfg.epochs == 0 or out is not None and not (out / "best.ckpt").exists())
    best_model, _ = restore(best)
    return TrainResult(history, best, best_model)


# ---------------------------------------------------------------- evaluation

def predict(model: PhiSegNet, samples, batch_size: int = 4) -> list[np.ndarray]:
    model.eval()
    preds = []
    with T.no_grad():
        for chunk in batches(samples, batch_size):
            x, _ = D.stack(chunk)
            for d_ in x.shape[-2:]:
                if d_ % 16:
                    raise T.ShapeError(f"resolution {x.shape[-2:]} is not divisible by 16")
            pred, _ = model(T.Tensor(x))
            preds.extend(pred.data)
    return preds


def evaluate(model: PhiSegNet, samples) -> list[tuple[str, MetricsReport]]:
    preds = predict(model, samples)
    return [(s.id, metrics(binarize(p[0]), s.mask[0])) for s, p in zip(samples, preds)]
