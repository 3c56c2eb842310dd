"""``phiseg`` command line: gen-data, train, eval, spectrum, verify.

Exit codes: 0 success, 2 usage error, 3 data/format error,
4 training divergence, 5 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import spectral as S
from . import train as TR
from . import verify as V
from .metrics import MetricsReport, csv_header, csv_row
from .model import reverse_fourier_mask
from .tensor import ShapeError, Tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4, 5
FILTER_NAMES = {"lowpass": "lowpass", "leaky": "leaky_lowpass", "highpass": "highpass", "none": "none"}

log = logging.getLogger("phiseg")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    try:
        spec = D.SynthSpec(size=args.size, count=args.count, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    splits = D.gen_synthetic(spec)
    D.write_dataset(args.out, splits)
    sizes = "/".join(str(len(splits[s])) for s in D.SPLITS)
    print(f"wrote {spec.count} samples of {spec.size}x{spec.size} to {args.out} "
          f"(train/val/test = {sizes}, seed {spec.seed})")
    return EXIT_OK


# ---------------------------------------------------------------- train

def load_config(path, overrides, seed) -> C.TrainConfig:
    try:
        cfg = C.load(path) if path else C.TrainConfig()
        if seed is not None:
            overrides = [f"train.seed={seed}"] + list(overrides)
        return cfg.with_overrides(overrides)
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from None
    except C.ConfigError as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    if not (Path(args.data) / D.MANIFEST).is_file():
        raise D.DataFormatError(f"no dataset at {args.data} (missing {D.MANIFEST})")
    t0 = time.perf_counter()
    result = TR.train_loop(cfg, args.data, args.out, progress=log.info)
    print(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.0f}s; "
          f"best val loss {result.best.best_val_loss!r} at epoch {result.best.epoch}; "
          f"wrote {Path(args.out) / 'best.ckpt'} and {Path(args.out) / 'history.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def eval_rows(model, samples, dataset: str, split: str) -> tuple[list[str], MetricsReport | None]:
    reports = TR.evaluate(model, samples)
    rows = [csv_row(dataset, split, sid, r) for sid, r in reports]
    agg = MetricsReport.mean([r for _, r in reports]) if reports else None
    if agg is not None:
        rows.append(csv_row(dataset, split, "mean", agg))
    return rows, agg


def cmd_eval(args) -> int:
    ckpt = TR.Checkpoint.load(args.ckpt)
    model, _ = TR.restore(ckpt)
    samples = D.load_split(args.data, args.split)
    rows, agg = eval_rows(model, samples, Path(args.data).name, args.split)
    text = "\n".join([csv_header()] + rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if agg is None:
        log.error("split %r of %s is empty; no aggregate row", args.split, args.data)
        return EXIT_DATA
    log.info("mean IoU %.4f over %d samples", agg.iou, len(samples))
    return EXIT_OK


# ---------------------------------------------------------------- spectrum

def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)


def _write_csv(path: Path, a: np.ndarray) -> None:
    path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in a) + "\n")


def spectrum_maps(image: np.ndarray, spec: S.FilterSpec) -> dict[str, np.ndarray]:
    """Magnitude, phase, both unwrapped phases and the reverse mask for one image.

    The image plays the role of the phi-mask, so the reverse mask is
    ``|IDFT(filter(DFT(1 - image)))|``.
    """
    x = Tensor(image[None])
    X = S.dft2(x)
    ph = S.phase(X)
    return {
        "magnitude": S.magnitude(X).data[0, 0],
        "phase": ph.data[0, 0],
        "unwrapped_row": S.unwrap_axis(ph, "row").data[0, 0],
        "unwrapped_col": S.unwrap_axis(ph, "col").data[0, 0],
        "xhat": reverse_fourier_mask(x, spec).data[0, 0],
    }


def cmd_spectrum(args) -> int:
    image = D.load_pgm(Path(args.img).read_bytes())
    spec = S.FilterSpec(FILTER_NAMES[args.filter], args.gamma, not args.no_gamma_weight)
    maps = spectrum_maps(image, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, a in maps.items():
        _write_csv(out / f"{name}.csv", a)
        view = np.log1p(a) if name == "magnitude" else a
        (out / f"{name}.pgm").write_bytes(D.save_pgm(_normalize(view)))
    print(f"wrote {', '.join(maps)} (.csv, .pgm) to {out}")
    if args.shift_demo:
        M, N = image.shape[-2:]
        mag_dev, ramp_err = V.shift_theorem(image[0], M // 4, N // 8)
        print(f"shift demo ({M // 4}, {N // 8}): max magnitude deviation {mag_dev:.3e}, "
              f"max phase-ramp error {ramp_err:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------- verify

def cmd_verify(args) -> int:
    if args.inject_grad_fault:
        with V.perturbed_gradients():
            checks = V.run(args.suite, args.seed)
    else:
        checks = V.run(args.suite, args.seed)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="phiseg", formatter_class=fmt,
                                description="Phase-supervised segmentation on a numpy autodiff engine.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", formatter_class=fmt, help="write a synthetic dataset",
                       description="Generate the synthetic lesion dataset as PGM files.")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--size", type=int, default=64, help="image side, a multiple of 16")
    g.add_argument("--count", type=int, default=250, help="number of samples (8:1:1 split)")
    g.add_argument("--seed", type=int, default=42, help="generation seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", formatter_class=fmt, help="train a model",
                       description="Train and keep the checkpoint with the lowest validation "
                                   "segmentation loss.")
    t.add_argument("--config", default=None, help="config file; built-in defaults when omitted")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory for best.ckpt and history.csv")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="config override, repeatable; wins over the file")
    t.add_argument("--seed", type=int, default=None, help="training seed; overrides train.seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", formatter_class=fmt, help="evaluate a checkpoint",
                       description="Per-sample metrics CSV plus an aggregate 'mean' row.")
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test", choices=D.SPLITS, help="split to evaluate")
    e.add_argument("--out", default=None, help="CSV path; stdout when omitted")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("spectrum", formatter_class=fmt, help="spectral diagnostics for one image",
                       description="Write magnitude, phase, unwrapped phase and reverse-mask "
                                   "maps as PGM heatmaps and full-precision CSV.")
    s.add_argument("--img", required=True, help="input PGM image")
    s.add_argument("--gamma", type=float, default=3.0, help="filter size")
    s.add_argument("--filter", default="lowpass", choices=list(FILTER_NAMES), help="filter type")
    s.add_argument("--no-gamma-weight", action="store_true", help="disable the gamma^2 passband gain")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--shift-demo", action="store_true", help="print the shift-theorem check")
    s.set_defaults(func=cmd_spectrum)

    v = sub.add_parser("verify", formatter_class=fmt, help="run self-check suites",
                       description="Gradient, Fourier and metric checks with their tolerances.")
    v.add_argument("--suite", default="all", choices=("all",) + V.SUITES, help="suite to run")
    v.add_argument("--seed", type=int, default=0, help="seed for random test inputs")
    v.add_argument("--inject-grad-fault", action="store_true",
                   help="test hook: perturb every backward rule by 1%%")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"phiseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataFormatError, TR.CheckpointError, S.FilterError, ShapeError,
            FileNotFoundError) as e:
        print(f"phiseg: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TR.TrainingDiverged as e:
        print(f"phiseg: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
