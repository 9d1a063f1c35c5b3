"""``arrayssl`` command line: gen, pretrain, transfer, eval, plot.

Every command writes one JSON run manifest next to its main output. Exit
codes: 0 success, 2 usage error, 3 data-format error, 4 numerical failure.
``ARRAYSSL_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from html import escape
from pathlib import Path

from .checkpoint import load_checkpoint
from .dsp import preprocess_frames
from .errors import (
    ConfigError,
    FormatError,
    LabelError,
    NonFiniteError,
    ParameterError,
    SceneError,
    ShapeError,
    TransferError,
)
from .models import BandwidthNet
from .synthgen import load_capture, make_capture_set, read_rfcap
from .training import (
    PRETRAIN_DEFAULTS,
    TRANSFER_DEFAULTS,
    TrainConfig,
    evaluate,
    make_bandwidth_objective,
    model_from_checkpoint,
    pretrain,
    train_bandwidth,
)

logger = logging.getLogger("arrayssl")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "ARRAYSSL_THREADS"
METRICS_HEADER = ["epoch", "train_loss", "val_loss", "lr", "saved"]


class UsageError(Exception):
    pass


# -- manifest -------------------------------------------------------------
def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: list[str] = field(default_factory=list)
    duration_s: float = 0.0

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def manifest_path(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


# -- helpers --------------------------------------------------------------
def _positive(name):
    def parse(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if value < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {value}")
        return value
    return parse


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be a finite number > 0, got {text}")
    return value


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _train_config(args, defaults: TrainConfig, **extra) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch,
        initial_lr=args.lr,
        early_stop_patience=defaults.early_stop_patience,
        plateau_patience=defaults.plateau_patience,
        lr_factor=defaults.lr_factor,
        val_fraction=args.val_fraction,
        seed=args.seed,
        max_epochs=args.max_epochs,
        **extra,
    )


def _examples(frames, chunks):
    if frames.shape[2] % chunks:
        raise UsageError(f"--chunks {chunks} does not divide the frame length {frames.shape[2]}")
    return preprocess_frames(frames, chunks)


def _labeled(args):
    cap = read_rfcap(args.data)
    n_bins = cap.shape[2] // args.chunks
    capture = load_capture(args.data, args.labels, n_bins)
    return _examples(capture.frames, args.chunks), capture.targets()


# -- commands -------------------------------------------------------------
def cmd_gen(args) -> tuple[RunManifest, Path]:
    if args.samples % args.bins:
        raise UsageError(f"--bins {args.bins} must divide --samples {args.samples}")
    if args.signals_min > args.signals_max:
        raise UsageError("--signals-min exceeds --signals-max")
    if args.snr_min > args.snr_max:
        raise UsageError("--snr-min exceeds --snr-max")
    if args.bins < 16:
        raise UsageError("--bins must be >= 16 (the narrowest generated band is 8 bins)")
    cap = make_capture_set(args.frames, args.antennas, args.samples, args.bins, seed=args.seed,
                           n_signals=(args.signals_min, args.signals_max), snr_db=(args.snr_min, args.snr_max))
    out = Path(args.out)
    cap_path, lab_path = cap.save(out)
    m = RunManifest("gen", _config_snapshot(args), args.seed, outputs=[str(cap_path), str(lab_path)])
    print(f"wrote {cap_path} ({args.frames} frames) and {lab_path}")
    return m, manifest_path(cap_path)


def cmd_pretrain(args) -> tuple[RunManifest, Path]:
    frames = read_rfcap(args.data)
    examples = _examples(frames, args.chunks)
    config = _train_config(args, PRETRAIN_DEFAULTS)
    _, result = pretrain(examples, config, checkpoint_path=args.out_ckpt, metrics_path=args.metrics)
    m = RunManifest("pretrain", _config_snapshot(args), args.seed, outputs=[str(args.out_ckpt), str(args.metrics)])
    m.add_input(args.data)
    print(f"initial val loss {result.initial_val_loss:.6f}; best {result.best_val_loss:.6f} "
          f"at epoch {result.best_epoch} of {len(result.records)}")
    return m, manifest_path(args.out_ckpt)


def cmd_transfer(args) -> tuple[RunManifest, Path]:
    if args.random_init and args.freeze_encoder:
        raise UsageError("--freeze-encoder needs --encoder-ckpt")
    examples, targets = _labeled(args)
    source = None
    if args.encoder_ckpt is not None:
        source = model_from_checkpoint(load_checkpoint(args.encoder_ckpt))
        if not hasattr(source, "encoder"):
            raise TransferError(f"{args.encoder_ckpt}: checkpoint has no encoder")
    config = _train_config(args, TRANSFER_DEFAULTS, freeze_encoder=args.freeze_encoder)
    _, result = train_bandwidth(examples, targets, config, encoder_source=source,
                                checkpoint_path=args.out_ckpt, metrics_path=args.metrics)
    m = RunManifest("transfer", _config_snapshot(args), args.seed, outputs=[str(args.out_ckpt), str(args.metrics)])
    m.add_input(args.data)
    m.add_input(args.labels)
    if args.encoder_ckpt is not None:
        m.add_input(args.encoder_ckpt)
    arm = "baseline" if source is None else ("frozen" if args.freeze_encoder else "pretrained")
    print(f"{arm}: initial val loss {result.initial_val_loss:.6f}; best {result.best_val_loss:.6f} "
          f"at epoch {result.best_epoch} of {len(result.records)}")
    return m, manifest_path(args.out_ckpt)


def cmd_eval(args) -> tuple[RunManifest, Path]:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    if not isinstance(model, BandwidthNet):
        raise FormatError(f"{args.ckpt}: not a bandwidth model checkpoint")
    args.chunks = model.n_chunks
    examples, targets = _labeled(args)
    res = evaluate(model, examples, targets, make_bandwidth_objective())
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".eval.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example", "loss"])
        for i, v in enumerate(res.per_example):
            w.writerow([i, repr(float(v))])
    print(f"mean loss {res.mean_loss:.6f}")
    print(f"best-case loss {res.best_case:.6f}")
    m = RunManifest("eval", _config_snapshot(args), None, outputs=[str(out)])
    for p in (args.ckpt, args.data, args.labels):
        m.add_input(p)
    return m, manifest_path(out)


# -- plotting -------------------------------------------------------------
def read_metrics_csv(path) -> list[tuple[int, float, float, float, int]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(METRICS_HEADER)}")
        for row in reader:
            lineno = reader.line_num
            if len(row) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                rec = (int(row[0]), float(row[1]), float(row[2]), float(row[3]), int(row[4]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not (rec[1] > 0 and rec[2] > 0 and math.isfinite(rec[1]) and math.isfinite(rec[2])):
                raise FormatError(f"{path}:{lineno}: losses must be finite and > 0 for a log axis")
            rows.append(rec)
    if not rows:
        raise FormatError(f"{path}: no epochs")
    return rows


PANEL_W, PANEL_H, MARGIN = 480, 320, 48
COLORS = {"train": "#1f77b4", "val": "#d62728"}


def _panel(rows, title, x0) -> list[str]:
    epochs = [r[0] for r in rows]
    logs = {"train": [math.log10(r[1]) for r in rows], "val": [math.log10(r[2]) for r in rows]}
    lo = math.floor(min(min(v) for v in logs.values()))
    hi = math.ceil(max(max(v) for v in logs.values()))
    if hi == lo:
        hi = lo + 1
    e_lo, e_hi = min(epochs), max(max(epochs), min(epochs) + 1)
    w, h = PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN

    def px(e):
        return x0 + MARGIN + w * (e - e_lo) / (e_hi - e_lo)

    def py(v):
        return MARGIN + h * (hi - v) / (hi - lo)

    out = [f'<g class="panel">',
           f'<text x="{x0 + PANEL_W / 2:.2f}" y="{MARGIN / 2:.2f}" text-anchor="middle">{escape(title)}</text>',
           f'<rect x="{x0 + MARGIN}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="#000"/>']
    for d in range(lo, hi + 1):
        out.append(f'<text x="{x0 + MARGIN - 4}" y="{py(d):.2f}" text-anchor="end" font-size="10">1e{d}</text>')
    for name, vals in logs.items():
        pts = " ".join(f"{px(e):.2f},{py(v):.2f}" for e, v in zip(epochs, vals))
        out.append(f'<polyline class="{name}" points="{pts}" fill="none" stroke="{COLORS[name]}"/>')
    out.append(f'<text x="{x0 + PANEL_W / 2:.2f}" y="{PANEL_H - 8}" text-anchor="middle" font-size="10">epoch</text>')
    out.append("</g>")
    return out


def render_svg(panels) -> str:
    """``panels``: list of ``(title, rows)``; one panel each, side by side."""
    width = PANEL_W * len(panels)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" '
             f'viewBox="0 0 {width} {PANEL_H}">']
    for i, (title, rows) in enumerate(panels):
        lines += _panel(rows, title, i * PANEL_W)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_plot(args) -> tuple[RunManifest, Path]:
    if len(args.metrics) > 2:
        raise UsageError("--metrics takes one or two CSV files")
    panels = [(Path(p).stem, read_metrics_csv(p)) for p in args.metrics]
    Path(args.out).write_text(render_svg(panels))
    m = RunManifest("plot", _config_snapshot(args), None, outputs=[str(args.out)])
    for p in args.metrics:
        m.add_input(p)
    return m, manifest_path(args.out)


# -- parser ---------------------------------------------------------------
def _config_snapshot(args) -> dict:
    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, list):
            return [plain(x) for x in v]
        return v

    return {k: plain(v) for k, v in sorted(vars(args).items()) if k != "func"}


def _training_flags(p, defaults: TrainConfig):
    p.add_argument("--batch", type=_positive("--batch"), default=defaults.batch_size)
    p.add_argument("--lr", type=_positive_float, default=defaults.initial_lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chunks", type=_positive("--chunks"), default=32, help="STFT time chunks per frame")
    p.add_argument("--max-epochs", type=int, default=None, help="cap on epochs (default: until early stop)")
    p.add_argument("--val-fraction", type=float, default=defaults.val_fraction)
    p.add_argument("--out-ckpt", type=Path, required=True)
    p.add_argument("--metrics", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arrayssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a labeled capture set")
    g.add_argument("--frames", type=_positive("--frames"), default=77)
    g.add_argument("--antennas", type=_positive("--antennas"), default=4)
    g.add_argument("--samples", type=_positive("--samples"), default=65536)
    g.add_argument("--bins", type=_positive("--bins"), default=2048)
    g.add_argument("--signals-min", type=_positive("--signals-min"), default=1)
    g.add_argument("--signals-max", type=_positive("--signals-max"), default=6)
    g.add_argument("--snr-min", type=float, default=5.0)
    g.add_argument("--snr-max", type=float, default=25.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True, help="output stem; writes STEM.rfcap and STEM.rflab")
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="channel in-painting pretraining")
    p.add_argument("--data", type=Path, required=True)
    _training_flags(p, PRETRAIN_DEFAULTS)
    p.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("transfer", help="train the bandwidth regressor")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--labels", type=Path, required=True)
    arm = t.add_mutually_exclusive_group(required=True)
    arm.add_argument("--encoder-ckpt", type=Path, help="pretrained in-painting checkpoint")
    arm.add_argument("--random-init", action="store_true", help="baseline arm")
    t.add_argument("--freeze-encoder", action="store_true")
    _training_flags(t, TRANSFER_DEFAULTS)
    t.set_defaults(func=cmd_transfer)

    e = sub.add_parser("eval", help="evaluate a bandwidth checkpoint")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--labels", type=Path, required=True)
    e.add_argument("--out", type=Path, default=None, help="per-example loss CSV")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="loss curves as SVG")
    pl.add_argument("--metrics", type=Path, nargs="+", required=True)
    pl.add_argument("--out", type=Path, required=True)
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        with _thread_limit():
            manifest, manifest_file = args.func(args)
    except (UsageError, ConfigError, ParameterError, SceneError) as exc:
        print(f"arrayssl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, LabelError, ShapeError, TransferError, OSError) as exc:
        print(f"arrayssl {args.command}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"arrayssl {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    manifest.duration_s = round(time.perf_counter() - start, 3)
    try:
        manifest.write(manifest_file)
    except OSError as exc:
        print(f"arrayssl {args.command}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
