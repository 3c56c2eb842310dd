"""Synthetic lesion-like dataset, PGM I/O, augmentation and multi-scale resizing."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import interp_matrix

SPLITS = ("train", "val", "test")
MANIFEST = "dataset.txt"


class DataFormatError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) in [0, 1]
    mask: np.ndarray  # (1, H, W) in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DataFormatError(f"{self.id}: image {self.image.shape} vs mask {self.mask.shape}")


@dataclass
class SynthSpec:
    size: int = 64
    count: int = 250
    seed: int = 42
    noise_sigma: float = 0.08
    blob_count_range: tuple[int, int] = (1, 2)
    intensity_contrast: float = 0.35

    def __post_init__(self):
        if self.size <= 0 or self.size % 16:
            raise ValueError(f"size must be a positive multiple of 16, got {self.size}")
        if self.count < 1:
            raise ValueError(f"count must be at least 1, got {self.count}")


# ---------------------------------------------------------------- generation

def _blob(rng: np.random.Generator, n: int) -> np.ndarray:
    """Rasterized rotated ellipse whose radius wobbles with low-order sinusoids."""
    cy, cx = rng.uniform(0.2 * n, 0.8 * n, size=2)
    a, b = rng.uniform(0.08 * n, 0.22 * n, size=2)
    theta = rng.uniform(0, math.pi)
    orders = np.arange(2, 5)
    amps = rng.uniform(0.0, 0.08, size=orders.size)
    phases = rng.uniform(0, 2 * math.pi, size=orders.size)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    ang = np.arctan2(v / b, u / a)
    edge = 1.0 + (amps[:, None, None] * np.cos(orders[:, None, None] * ang + phases[:, None, None])).sum(0)
    return rho <= edge


def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="edge")
    return sum(p[i:i + a.shape[0], j:j + a.shape[1]] for i in range(3) for j in range(3)) / 9.0


def gen_sample(spec: SynthSpec, index: int) -> Sample:
    n = spec.size
    sub = 0
    while True:
        rng = np.random.default_rng([spec.seed, index, sub])
        for _ in range(100):
            lo, hi = spec.blob_count_range
            mask = np.zeros((n, n), dtype=bool)
            for _ in range(int(rng.integers(lo, hi + 1))):
                mask |= _blob(rng, n)
            frac = mask.mean()
            if 0.03 <= frac <= 0.30:
                break
        else:
            sub += 1
            continue
        break

    yy, xx = np.mgrid[0:n, 0:n] / n
    gx, gy = rng.uniform(-0.05, 0.05, size=2)
    background = 0.15 + gx * (xx - 0.5) + gy * (yy - 0.5)
    fg = _box3(mask.astype(np.float64))  # soft edge so boundaries look fuzzy
    texture = 1.0 + 0.15 * rng.standard_normal((n, n))
    image = background + spec.intensity_contrast * fg * texture
    image = image + spec.noise_sigma * rng.standard_normal((n, n))
    image = np.clip(image, 0.0, 1.0)
    return Sample(image[None], mask[None].astype(np.float64), f"s{index:05d}")


def split_sizes(count: int) -> tuple[int, int, int]:
    """8:1:1 split; val and test get count // 10 each."""
    held = count // 10
    return count - 2 * held, held, held


def gen_synthetic(spec: SynthSpec) -> dict[str, list[Sample]]:
    samples = [gen_sample(spec, i) for i in range(spec.count)]
    order = np.random.default_rng([spec.seed, 0xDA7A]).permutation(spec.count)
    n_train, n_val, _ = split_sizes(spec.count)
    parts = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    return {k: [samples[i] for i in sorted(v)] for k, v in parts.items()}


# ---------------------------------------------------------------- PGM

def save_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    if img.ndim != 2:
        raise DataFormatError(f"expected a (1, H, W) or (H, W) image, got {image.shape}")
    if np.any(img < 0) or np.any(img > 1):
        raise DataFormatError("PGM values must lie in [0, 1]")
    H, W = img.shape
    payload = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{W} {H}\n255\n".encode("ascii") + payload.tobytes()


def load_pgm(data: bytes) -> np.ndarray:
    """Parse a binary P5 PGM with maxval 255 into a (1, H, W) float array."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"truncated PGM header at byte {pos}")
        tokens.append((start, data[start:pos]))
    start, magic = tokens[0]
    if magic != b"P5":
        raise DataFormatError(f"bad PGM magic {magic!r} at byte {start}")
    try:
        W, H, maxval = (int(t) for _, t in tokens[1:])
    except ValueError:
        raise DataFormatError(f"non-numeric PGM header field near byte {tokens[1][0]}") from None
    if maxval != 255:
        raise DataFormatError(f"unsupported maxval {maxval} at byte {tokens[3][0]}")
    pos += 1  # single whitespace byte ends the header
    need = W * H
    if len(data) - pos < need:
        raise DataFormatError(f"truncated PGM payload: expected {need} bytes from byte {pos}, "
                              f"got {len(data) - pos}")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(H, W)
    return (arr.astype(np.float64) / 255.0)[None]


# ---------------------------------------------------------------- on-disk layout

def write_dataset(root: str | os.PathLike, splits: dict[str, list[Sample]]) -> None:
    root = Path(root)
    lines = []
    for split in SPLITS:
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        lines.append(f"[{split}]")
        for s in splits.get(split, []):
            (d / f"{s.id}.img.pgm").write_bytes(save_pgm(s.image))
            (d / f"{s.id}.mask.pgm").write_bytes(save_pgm(s.mask))
            lines.append(s.id)
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(root: str | os.PathLike) -> dict[str, list[str]]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise DataFormatError(f"missing manifest {path}")
    out: dict[str, list[str]] = {s: [] for s in SPLITS}
    current = None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in out:
                raise DataFormatError(f"{path}:{lineno}: unknown split {current!r}")
        elif current is None:
            raise DataFormatError(f"{path}:{lineno}: id before any split header")
        else:
            out[current].append(line)
    return out


def load_split(root: str | os.PathLike, split: str) -> list[Sample]:
    root = Path(root)
    ids = read_manifest(root)[split]
    samples = []
    for sid in ids:
        img = load_pgm((root / split / f"{sid}.img.pgm").read_bytes())
        mask = load_pgm((root / split / f"{sid}.mask.pgm").read_bytes())
        samples.append(Sample(img, (mask >= 0.5).astype(np.float64), sid))
    return samples


# ---------------------------------------------------------------- augmentation

def hflip(s: Sample) -> Sample:
    return Sample(s.image[..., ::-1].copy(), s.mask[..., ::-1].copy(), s.id)


def vflip(s: Sample) -> Sample:
    return Sample(s.image[..., ::-1, :].copy(), s.mask[..., ::-1, :].copy(), s.id)


def translate(s: Sample, dy: int, dx: int) -> Sample:
    """Integer shift with zero fill."""
    def shift(a):
        out = np.zeros_like(a)
        H, W = a.shape[-2:]
        ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
        xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
        out[..., yd, xd] = a[..., ys, xs]
        return out
    return Sample(shift(s.image), shift(s.mask), s.id)


def augment(s: Sample, rng: np.random.Generator, p_flip: float = 0.5,
            p_translate: float = 0.5, max_shift: float = 0.1) -> Sample:
    """Random h/v flips and a zero-filled integer translation of up to
    ``max_shift`` of the side. Draw order is fixed so streams are reproducible."""
    u = rng.random(3)
    H, W = s.image.shape[-2:]
    ty, tx = int(max_shift * H), int(max_shift * W)
    dy, dx = int(rng.integers(-ty, ty + 1)), int(rng.integers(-tx, tx + 1))
    if u[0] < p_flip:
        s = hflip(s)
    if u[1] < p_flip:
        s = vflip(s)
    if u[2] < p_translate and (dy or dx):
        s = translate(s, dy, dx)
    return s


SCALES = (0.5, 1.0, 1.25)


def draw_scale(rng: np.random.Generator, scales=SCALES) -> float:
    return float(scales[int(rng.integers(len(scales)))])


def snapped_size(n: int, scale: float, multiple: int = 16) -> int:
    return int(math.floor(n * scale / multiple + 0.5)) * multiple


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def multiscale(s: Sample, scale: float, multiple: int = 16) -> Sample:
    """Resize to ``scale`` (snapped to a multiple of 16): bilinear image,
    nearest-neighbour mask. Sizes below 16 leave the sample unchanged."""
    H, W = s.image.shape[-2:]
    Ho, Wo = snapped_size(H, scale, multiple), snapped_size(W, scale, multiple)
    if Ho < multiple or Wo < multiple:
        return s
    if (Ho, Wo) == (H, W):
        return s
    Ah = interp_matrix(H, Ho, Ho / H)
    Aw = interp_matrix(W, Wo, Wo / W)
    image = np.einsum("oh,chw,pw->cop", Ah, s.image, Aw)
    mask = s.mask[:, _nearest_index(H, Ho)][:, :, _nearest_index(W, Wo)]
    return Sample(image, (mask >= 0.5).astype(np.float64), s.id)


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))
