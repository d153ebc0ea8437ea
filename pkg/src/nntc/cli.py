"""Command-line entry point.

Subcommands: prepare-data, train, encode, decode, progressive, evaluate,
rd-curve.  Exit status 0 on success, 1 with a one-line ``error: ...`` on
domain failures, 2 on usage errors.  Given the same flags, seed, and input
files every subcommand produces byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import codec, metrics
from .models import ModelConfig, build_model
from .training import (DatasetSpec, TrainConfig, extract_patches, ingest_images,
                       load_checkpoint, save_checkpoint, save_dataset_pngs,
                       scale_to_network, train_loop)


@dataclass
class RunConfig:
    """Model plus training settings, as read from a JSON config file."""

    model: ModelConfig
    train: TrainConfig


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def load_run_config(path) -> RunConfig:
    """Strict JSON config: unknown keys are rejected by name."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config root must be a JSON object")
    unknown = sorted(set(doc) - {"model", "train"})
    if unknown:
        raise ValueError(f"{path}: unknown key {unknown[0]!r} (expected 'model' and 'train')")
    model_doc = doc.get("model", {})
    train_doc = doc.get("train", {})
    for section, known, got in (("model", _MODEL_KEYS, model_doc),
                                ("train", _TRAIN_KEYS, train_doc)):
        if not isinstance(got, dict):
            raise ValueError(f"{path}: section {section!r} must be a JSON object")
        bad = sorted(set(got) - known)
        if bad:
            raise ValueError(f"{path}: unknown key {bad[0]!r} in section {section!r}")
    if "variant" not in model_doc:
        raise ValueError(f"{path}: 'model.variant' is required")
    model_doc = dict(model_doc)
    if "conv_filters" in model_doc:
        model_doc["conv_filters"] = tuple(model_doc["conv_filters"])
    return RunConfig(model=ModelConfig(**model_doc), train=TrainConfig(**train_doc))


def dump_run_config(cfg: RunConfig) -> str:
    """Effective config (all defaults resolved) as re-parseable JSON."""
    doc = {"model": asdict(cfg.model), "train": asdict(cfg.train)}
    doc["model"]["conv_filters"] = list(doc["model"]["conv_filters"])
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# image file I/O
# ---------------------------------------------------------------------------

def _load_png(path, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB" if channels == 3 else "L"), dtype=np.uint8)
    return arr.transpose(2, 0, 1) if arr.ndim == 3 else arr[None]


def _save_png(path, img: np.ndarray) -> None:
    data = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    Image.fromarray(data).save(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_prepare_data(args) -> int:
    spec = DatasetSpec(source_dir=args.input_dir, target_size=args.target_size,
                       channels=args.channels, train_fraction=1.0, eval_fraction=0.0,
                       shuffle_seed=args.seed)
    ds = ingest_images(spec)
    count = save_dataset_pngs(ds, args.output_dir)
    print(f"accepted={ds.accepted} rejected={ds.rejected} unreadable={ds.unreadable} "
          f"written={count}")
    return 0


def _cmd_train(args) -> int:
    if args.config:
        cfg = load_run_config(args.config)
    elif args.variant:
        cfg = RunConfig(model=ModelConfig(variant=args.variant), train=TrainConfig())
    else:
        raise ValueError("either --config or --variant is required")
    for name in ("steps", "lr", "batch", "iterations", "seed"):
        value = getattr(args, name)
        if value is None:
            continue
        attr = {"lr": "learning_rate", "batch": "batch_size",
                "iterations": "n_iterations"}.get(name, name)
        setattr(cfg.train, attr, value)
    cfg.train.__post_init__()

    spec = DatasetSpec(source_dir=args.data, channels=cfg.model.channels,
                       shuffle_seed=cfg.train.seed)
    ds = ingest_images(spec)
    patches = np.concatenate(
        [np.stack(extract_patches(img, cfg.model.patch_size)) for img in ds.train])
    patches = scale_to_network(patches)

    model = build_model(cfg.model, seed=cfg.train.seed)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        def log_fn(step, loss, lr):
            line = f"step={step} loss={loss:.10e} lr={lr:g}"
            if log_fh:
                log_fh.write(line + "\n")
            elif step % 50 == 0 or step == cfg.train.steps - 1:
                print(line)
        losses = train_loop(model, patches, cfg.train, log_fn=log_fn)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(model, None, args.output)
    if args.dump_config:
        Path(args.dump_config).write_text(dump_run_config(cfg), encoding="utf-8")
    print(f"trained steps={cfg.train.steps} final_loss={losses[-1]:.10e} "
          f"checkpoint={args.output}")
    return 0


def _cmd_encode(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    img = _load_png(args.input, model.config.channels)
    chosen = [name for name in ("iterations", "bytes", "dynamic")
              if getattr(args, name)]
    if len(chosen) != 1:
        raise ValueError("exactly one of --iterations, --bytes, --dynamic is required")
    if args.iterations:
        stream = codec.encode_image(model, img, args.iterations)
    elif args.bytes:
        stream = codec.encode_with_budget(model, img, args.bytes)
    else:
        target = codec.QualityTarget(metric=args.metric, threshold=args.threshold,
                                     min_iterations=args.min_iterations,
                                     max_iterations=args.max_iterations
                                     or model.config.max_iterations)
        stream = codec.encode_dynamic(model, img, target)
    Path(args.output).write_bytes(codec.serialize(stream))
    print(f"payload_bytes={len(stream.payload)} "
          f"iterations={max(stream.header.iteration_counts)}")
    return 0


def _cmd_decode(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    stream = codec.deserialize(Path(args.input).read_bytes())
    img = codec.decode_image(model, stream)
    _save_png(args.output, img)
    print(f"decoded={args.output}")
    return 0


def _cmd_progressive(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    stream = codec.deserialize(Path(args.input).read_bytes())
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = codec.decode_progressive(model, stream)
    for t, img in enumerate(images, start=1):
        _save_png(out_dir / f"step_{t:02d}.png", img)
    print(f"wrote={len(images)} dir={out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    a = _load_png(args.original, args.channels)
    b = _load_png(args.reconstruction, args.channels)
    report = metrics.ssim_image(a, b)
    db = metrics.psnr(a, b)
    print(f"mean_ssim={report.mean:.6f}")
    print(f"psnr_db={'inf' if db == float('inf') else f'{db:.4f}'}")
    return 0


def _cmd_rd_curve(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    spec = DatasetSpec(source_dir=args.data, channels=model.config.channels,
                       train_fraction=1.0, eval_fraction=0.0)
    ds = ingest_images(spec)
    iteration_list = [int(t) for t in args.iterations.split(",")]
    points = metrics.rd_curve(model, list(ds.all_samples), iteration_list)
    Path(args.output).write_text(metrics.rd_curve_csv(points), encoding="utf-8")
    print(f"points={len(points)} csv={args.output}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nntc",
                                     description="variable-rate neural thumbnail codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="ingest and downsample a PNG corpus")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--target-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_prepare_data)

    p = sub.add_parser("train", help="train a model on a PNG corpus")
    p.add_argument("--config", help="JSON run config (model + train sections)")
    p.add_argument("--variant", choices=("fc-residual", "fc-lstm", "conv-residual", "conv-lstm"))
    p.add_argument("--data", required=True, help="directory of PNG images")
    p.add_argument("--output", required=True, help="checkpoint path to write")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--iterations", type=int, help="chain length during training")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="write step/loss/lr records to this file")
    p.add_argument("--dump-config", help="write the effective config JSON here")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("encode", help="encode a PNG to an NNTC bitstream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--iterations", type=int, help="uniform iteration count")
    p.add_argument("--bytes", type=int, help="payload byte budget (floor rule)")
    p.add_argument("--dynamic", action="store_true", help="per-patch quality targeting")
    p.add_argument("--metric", choices=("psnr", "ssim"), default="psnr")
    p.add_argument("--threshold", type=float, default=30.0)
    p.add_argument("--min-iterations", type=int, default=1)
    p.add_argument("--max-iterations", type=int)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decode an NNTC bitstream to PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("progressive", help="dump one PNG per iteration prefix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="NNTC bitstream")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_progressive)

    p = sub.add_parser("evaluate", help="SSIM/PSNR between two PNGs")
    p.add_argument("--original", required=True)
    p.add_argument("--reconstruction", required=True)
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("rd-curve", help="rate-distortion sweep over a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iterations", required=True, help="comma-separated counts, e.g. 5,7,9,11")
    p.add_argument("--output", required=True, help="CSV path")
    p.set_defaults(func=_cmd_rd_curve)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
