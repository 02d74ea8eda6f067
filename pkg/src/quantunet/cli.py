"""``qunet`` command-line entry point.

Subcommands: gen-synth, train, eval, export, infer, report. Settings resolve
as built-in defaults, then ``--config`` (a JSON file such as the
``effective-config.json`` every run writes), then explicit flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .data import RawRecord, SplitSpec, SynthConfig, generate_synthetic, load_dataset, preprocess, stratified_split, write_busi
from .errors import ConfigError, QuantUNetError
from .model import UNetConfig, build
from .report import emit_report
from .runtime import export_int_model, int_forward, load_int_model, save_int_model, size_report
from .train import TrainConfig, fit, load_checkpoint, validate, write_history_json

log = logging.getLogger("quantunet")

# flag name -> (config key, type, default)
SETTINGS = {
    "data": ("data", str, None),
    "out": ("out", str, None),
    "epochs": ("epochs", int, 40),
    "batch": ("batch_size", int, 8),
    "lr": ("lr", float, 1e-3),
    "lambda": ("lam", float, 0.25),
    "seed": ("seed", int, 0),
    "base": ("base_channels", int, 8),
    "img_size": ("img_size", int, 128),
    "init_bitwidth": ("init_bitwidth", float, 4.0),
    "act_bits": ("act_bitwidth", int, 8),
}


def _add_settings(p: argparse.ArgumentParser, names: Sequence[str]) -> None:
    for name in names:
        key, typ, default = SETTINGS[name]
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=typ, default=None, help=f"default: {default}")
    p.add_argument("--config", type=Path, help="JSON settings file; explicit flags win")


def resolve(args: argparse.Namespace, names: Sequence[str]) -> dict:
    """defaults < config file < flags"""
    cfg = {SETTINGS[n][0]: SETTINGS[n][2] for n in names}
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
        known = {SETTINGS[n][0]: n for n in names}
        for key, val in loaded.items():
            if key in known:
                cfg[key] = SETTINGS[known[key]][1](val) if val is not None else None
    for n in names:
        val = getattr(args, n, None)
        if val is not None:
            cfg[SETTINGS[n][0]] = val
    return cfg


def _require(cfg: dict, key: str, flag: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"{flag} is required")
    return cfg[key]


def _splits(cfg: dict):
    samples = load_dataset(_require(cfg, "data", "--data"), cfg["img_size"])
    return stratified_split(samples, SplitSpec(seed=cfg["seed"]))


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        lam=cfg["lam"],
        seed=cfg["seed"],
        init_bitwidth=cfg["init_bitwidth"],
    )


# -- subcommands -----------------------------------------------------------
def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    samples = generate_synthetic(SynthConfig(n_samples=args.n, image_size=args.img_size, seed=args.seed))
    write_busi(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


TRAIN_FLAGS = ["data", "out", "epochs", "batch", "lr", "lambda", "seed", "base", "img_size", "init_bitwidth", "act_bits"]


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_FLAGS)
    out = Path(_require(cfg, "out", "--out"))
    train, val, test = _splits(cfg)
    ucfg = UNetConfig(
        base_channels=cfg["base_channels"],
        quantized=not args.float,
        act_bitwidth=cfg["act_bitwidth"],
        init_bitwidth=cfg["init_bitwidth"],
    )
    ucfg.validate()
    tcfg = _train_config(cfg)
    tcfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    effective = dict(cfg, quantized=ucfg.quantized)
    (out / "effective-config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
    log.info("split sizes: train %d, val %d, test %d", len(train), len(val), len(test))
    model = build(ucfg, seed=cfg["seed"])
    result = fit(model, train, val, tcfg, out_dir=out)
    write_history_json(out / "history.json", result)
    print(f"best val_dice {result.best_val_dice:.4f} at epoch {result.best_epoch}; checkpoint {out / 'best.ckpt'}")
    return 0


EVAL_FLAGS = ["data", "out", "seed", "img_size", "batch", "lambda"]


def cmd_eval(args) -> int:
    cfg = resolve(args, EVAL_FLAGS)
    model = load_checkpoint(args.checkpoint)
    train, val, test = _splits(cfg)
    split = {"train": train, "val": val, "test": test}[args.split]
    tcfg = TrainConfig(batch_size=cfg["batch_size"], lam=cfg["lam"], seed=cfg["seed"])
    m = validate(model, split, tcfg)
    report = {
        "split": args.split,
        "n": len(split),
        "loss": m["val_loss"],
        "dice": m["val_dice"],
        "accuracy": m["val_accuracy"],
        "avg_bitwidth": float(model.avg_bitwidth().data) if model.config.quantized else 32.0,
    }
    text = json.dumps(report, indent=2)
    print(text)
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval-{args.split}.json").write_text(text + "\n")
    return 0


EXPORT_FLAGS = ["data", "seed", "img_size"]


def cmd_export(args) -> int:
    cfg = resolve(args, EXPORT_FLAGS)
    model = load_checkpoint(args.checkpoint)
    calib = None
    if cfg.get("data"):
        train, _, _ = _splits(cfg)
        calib = np.stack([s.image for s in train[:8]])
    m = export_int_model(model, calib, meta={"image_size": cfg["img_size"]})
    size = save_int_model(m, args.out)
    rep = size_report(m)
    print(json.dumps(dict(rep.to_dict(), file_bytes=size), indent=2))
    return 0


def cmd_infer(args) -> int:
    m = load_int_model(args.model)
    size = args.img_size or int(m.meta.get("image_size", 128))
    try:
        with Image.open(args.image) as im:
            img = np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise QuantUNetError(f"cannot read image {args.image}: {exc}") from exc
    sample = preprocess(RawRecord(img, np.zeros(img.shape, dtype=bool), 0, str(args.image)), size)
    prob = int_forward(m, sample.image[None])[0, 0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    mask = np.where(prob > 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(mask, mode="L").save(out / f"{stem}_mask.png")
    np.save(out / f"{stem}_prob.npy", prob.astype(np.float32))
    print(f"wrote {out / (stem + '_mask.png')} and {out / (stem + '_prob.npy')} ({size}x{size})")
    return 0


def cmd_report(args) -> int:
    paths = emit_report(args.dir, args.out)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qunet", description="Learnable-bitwidth quantized U-Net toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-synth", help="write a synthetic dataset in BUSI layout")
    p.add_argument("--n", type=int, default=200, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--img-size", dest="img_size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train and write CSV logs plus the best checkpoint")
    _add_settings(p, TRAIN_FLAGS)
    p.add_argument("--float", action="store_true", help="train the unquantized baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    _add_settings(p, EVAL_FLAGS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="checkpoint to packed integer model file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    _add_settings(p, EXPORT_FLAGS)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", help="integer inference on one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--img-size", dest="img_size", type=int, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="SVG charts from a training run's CSVs")
    p.add_argument("dir", help="directory holding the CSV logs")
    p.add_argument("--out", default=None, help="output directory (default: the CSV directory)")
    p.set_defaults(func=cmd_report)
    return parser


def _thread_limit():
    raw = os.environ.get("QUNET_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"QUNET_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_info, threadpool_limits

    # a cap never raises a pool above its current size
    current = max((pool["num_threads"] for pool in threadpool_info()), default=1)
    return threadpool_limits(limits=max(1, min(n, current)))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (QuantUNetError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"qunet {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
