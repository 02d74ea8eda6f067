"""Training/validation loops, Adam, checkpoints, and CSV logs."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Sample, batch_iter
from .errors import CheckpointError, ContractError, TrainingError
from .losses import (
    DEFAULT_LAMBDA,
    LossBreakdown,
    dice_counts,
    pixel_accuracy,
    threshold,
    total_loss,
)
from .model import Layer, QuantUNet, UNetConfig, build, layer_plan
from .quant import ActQuantState, avg_bitwidth_value
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_dice", "val_accuracy", "avg_bitwidth"]
LAYER_HEADER = ["epoch", "layer", "bitwidth"]
LOSS_HEADER = ["epoch", "bce", "dice", "bitwidth_term"]


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    init_bitwidth: float = 4.0
    bit_lr: Optional[float] = None  # defaults to lr
    dtype: str = "float32"

    def validate(self) -> None:
        if self.lam < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    val_accuracy: float
    avg_bitwidth: float


@dataclass
class TraceRow:
    epoch: int
    layer_bits: list  # [(name, continuous bitwidth)]
    bce: float
    dice: float
    bitwidth_term: float


class Adam:
    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = [(list(ps), lr) for ps, lr in groups]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                k = id(p)
                g = p.grad
                if k not in self.m:
                    self.m[k] = np.zeros_like(p.data)
                    self.v[k] = np.zeros_like(p.data)
                m = self.m[k]
                v = self.v[k]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                step = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
                p.data = (p.data - step).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.grad = None


def make_optimizer(model: QuantUNet, cfg: TrainConfig) -> Adam:
    bit_lr = cfg.lr if cfg.bit_lr is None else cfg.bit_lr
    groups = [(model.weight_params(), cfg.lr), ([q.b_param for q in model.quant_params()], bit_lr)]
    return Adam(groups, cfg.beta1, cfg.beta2, cfg.eps)


def _bit_params(model: QuantUNet):
    return model.quant_params() if model.config.quantized else []


def _mean_breakdown(parts: list[tuple[int, LossBreakdown]], lam: float) -> LossBreakdown:
    n = sum(w for w, _ in parts)
    bce = sum(w * b.bce for w, b in parts) / n
    dice = sum(w * b.dice for w, b in parts) / n
    bits = sum(w * b.bitwidth for w, b in parts) / n
    return LossBreakdown.compose(bce, dice, bits, lam, sum(b.n for _, b in parts))


def _check_grads(model: QuantUNet, epoch: int, batch: int) -> None:
    # a non-finite input can vanish behind a ReLU yet still poison the weight gradients
    for layer in model.layers:
        for what, t in (("weight", layer.weight), ("bias", layer.bias), ("bitwidth", layer.qparams.b_param)):
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise TrainingError(f"non-finite {what} gradient in {layer.name} at epoch {epoch}, batch {batch}")


def train_epoch(model: QuantUNet, train: Sequence[Sample], cfg: TrainConfig, epoch: int,
                optimizer: Optional[Adam] = None) -> LossBreakdown:
    """One pass over ``train`` with an optimizer step per batch; returns batch-weighted means."""
    optimizer = optimizer or make_optimizer(model, cfg)
    model.train()
    dtype = np.dtype(cfg.dtype)
    parts = []
    for i, (x, y) in enumerate(batch_iter(train, cfg.batch_size, cfg.seed, epoch)):
        pred = model.forward(Tensor(x.astype(dtype)))
        loss, bd = total_loss(pred, y, _bit_params(model), cfg.lam)
        if not math.isfinite(float(loss.data)):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {i}: {bd}")
        optimizer.zero_grad()
        loss.backward()
        _check_grads(model, epoch, i)
        optimizer.step()
        parts.append((x.shape[0], bd))
    return _mean_breakdown(parts, cfg.lam)


def validate(model: QuantUNet, val: Sequence[Sample], cfg: TrainConfig) -> dict:
    """Loss, pooled Dice and pixel accuracy (masks thresholded at 0.5) over ``val``."""
    if not val:
        raise ContractError("cannot validate on an empty split")
    model.eval()
    dtype = np.dtype(cfg.dtype)
    parts = []
    inter = psum = tsum = 0.0
    correct = total = 0.0
    with no_grad():
        for x, y in batch_iter(val, cfg.batch_size, shuffle=False):
            pred = model.forward(Tensor(x.astype(dtype)))
            _, bd = total_loss(pred, y, _bit_params(model), cfg.lam)
            parts.append((x.shape[0], bd))
            pm = threshold(pred)
            i, p, t = dice_counts(pm, y)
            inter, psum, tsum = inter + i, psum + p, tsum + t
            correct += pixel_accuracy(pm, y) * y.size
            total += y.size
    bd = _mean_breakdown(parts, cfg.lam)
    smooth = bd.smooth
    return {
        "val_loss": bd.total,
        "val_dice": (2.0 * inter + smooth) / (psum + tsum + smooth),
        "val_accuracy": correct / total,
        "breakdown": bd,
    }


@dataclass
class FitResult:
    best_checkpoint: bytes
    best_val_dice: float
    best_epoch: int
    history: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    saves: list = field(default_factory=list)  # val_dice of each checkpoint write, in order


def fit(model: QuantUNet, train: Sequence[Sample], val: Sequence[Sample], cfg: TrainConfig,
        out_dir=None, on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> FitResult:
    """Train for ``cfg.epochs``, keeping the checkpoint with the best validation Dice."""
    cfg.validate()
    if not train:
        raise ContractError("training split is empty")
    opt = make_optimizer(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = FitResult(best_checkpoint=b"", best_val_dice=-1.0, best_epoch=0)
    for epoch in range(1, cfg.epochs + 1):
        tb = train_epoch(model, train, cfg, epoch, opt)
        vm = validate(model, val, cfg)
        bits = avg_bitwidth_value(model.quant_params())
        row = EpochMetrics(epoch, tb.total, vm["val_loss"], vm["val_dice"], vm["val_accuracy"], bits)
        result.history.append(row)
        result.trace.append(
            TraceRow(
                epoch,
                [(layer.name, layer.qparams.clamped) for layer in model.layers],
                tb.bce,
                tb.dice,
                tb.bitwidth_term,
            )
        )
        log.info(
            "epoch %d train %.4f val %.4f dice %.4f acc %.4f bits %.4f",
            epoch, row.train_loss, row.val_loss, row.val_dice, row.val_accuracy, bits,
        )
        if row.val_dice > result.best_val_dice:
            blob = checkpoint_bytes(model)
            result.best_checkpoint = blob
            result.best_val_dice = row.val_dice
            result.best_epoch = epoch
            result.saves.append(row.val_dice)
            if out is not None:
                _atomic_write(out / "best.ckpt", blob)
        if out is not None:
            write_logs(out, result)
        if on_epoch is not None:
            on_epoch(row)
    return result


# -- CSV logs ---------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.4f}"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_logs(out_dir, result: FitResult) -> None:
    out = Path(out_dir)
    metrics = [
        [m.epoch, _fmt(m.train_loss), _fmt(m.val_loss), _fmt(m.val_dice), _fmt(m.val_accuracy), _fmt(m.avg_bitwidth)]
        for m in result.history
    ]
    layers = [[t.epoch, name, _fmt(b)] for t in result.trace for name, b in t.layer_bits]
    losses = [[t.epoch, _fmt(t.bce), _fmt(t.dice), _fmt(t.bitwidth_term)] for t in result.trace]
    _atomic_write(out / "metrics.csv", _csv_text(METRICS_HEADER, metrics).encode())
    _atomic_write(out / "layer_bitwidths.csv", _csv_text(LAYER_HEADER, layers).encode())
    _atomic_write(out / "loss_components.csv", _csv_text(LOSS_HEADER, losses).encode())


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- checkpoints --------------------------------------------------------------
#
# layout: b"QCKP" | u32 version | u64 manifest length | manifest (UTF-8 JSON)
#         | float32 little-endian blob: for each layer, weight then bias

CKPT_MAGIC = b"QCKP"
CKPT_VERSION = 1


def checkpoint_bytes(model: QuantUNet) -> bytes:
    layers = []
    chunks = []
    offset = 0
    for layer in model.layers:
        w = np.ascontiguousarray(layer.weight.data, dtype="<f4")
        b = np.ascontiguousarray(layer.bias.data, dtype="<f4")
        layers.append({
            "name": layer.name,
            "kind": layer.kind,
            "weight_shape": list(w.shape),
            "bias_shape": list(b.shape),
            "offset": offset,
            "b_param": float(layer.qparams.value),
            "running_max": layer.act.running_max,
            "momentum": layer.act.momentum,
        })
        chunks += [w.tobytes(), b.tobytes()]
        offset += w.size + b.size
    manifest = {
        "format_version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "input_running_max": model.input_act.running_max,
        "input_momentum": model.input_act.momentum,
        "n_values": offset,
        "layers": layers,
    }
    text = json.dumps(manifest, indent=1).encode("utf-8")
    head = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(text))
    return head + text + b"".join(chunks)


def save_checkpoint(model: QuantUNet, path) -> None:
    _atomic_write(Path(path), checkpoint_bytes(model))


def parse_checkpoint(data: bytes) -> tuple[dict, np.ndarray]:
    if len(data) < 16 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, mlen = struct.unpack("<IQ", data[4:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"format_version: unsupported checkpoint version {version}")
    if 16 + mlen > len(data):
        raise CheckpointError("manifest: file truncated")
    try:
        manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"manifest: malformed ({exc})") from exc
    blob = data[16 + mlen:]
    n = manifest.get("n_values")
    if not isinstance(n, int) or len(blob) != 4 * n:
        raise CheckpointError(f"weights: expected {n} float32 values, file holds {len(blob) / 4:g}")
    return manifest, np.frombuffer(blob, dtype="<f4")


def load_checkpoint(path, model: Optional[QuantUNet] = None) -> QuantUNet:
    """Restore a model; if ``model`` is given, load into it after checking every shape."""
    data = Path(path).read_bytes()
    return model_from_checkpoint(data, model)


def model_from_checkpoint(data: bytes, model: Optional[QuantUNet] = None) -> QuantUNet:
    manifest, values = parse_checkpoint(data)
    try:
        cfg = UNetConfig.from_dict(manifest["config"])
    except TypeError as exc:
        raise CheckpointError(f"config: {exc}") from exc
    target = model if model is not None else build(cfg, seed=0)
    rows = manifest["layers"]
    if len(rows) != len(target.layers):
        raise CheckpointError(f"layers: checkpoint has {len(rows)} layers, model has {len(target.layers)}")
    staged = []
    for row, layer in zip(rows, target.layers):
        if row["name"] != layer.name:
            raise CheckpointError(f"layers: expected layer {layer.name}, found {row['name']}")
        for key, t in (("weight_shape", layer.weight), ("bias_shape", layer.bias)):
            if tuple(row[key]) != t.shape:
                raise CheckpointError(f"{row['name']}.{key}: checkpoint {tuple(row[key])} != model {t.shape}")
        off = row["offset"]
        nw = int(np.prod(row["weight_shape"]))
        nb = int(np.prod(row["bias_shape"]))
        w = values[off:off + nw].reshape(row["weight_shape"]).astype(np.float32)
        b = values[off + nw:off + nw + nb].astype(np.float32)
        staged.append((layer, w, b, row))
    if model is not None:
        mine = model.config.to_dict()
        for key, val in cfg.to_dict().items():
            if mine.get(key) != val:
                raise CheckpointError(f"config.{key}: checkpoint {val!r} != model {mine.get(key)!r}")
    for layer, w, b, row in staged:
        layer.weight.data = w
        layer.bias.data = b
        layer.qparams.b_param.data = np.asarray(row["b_param"], dtype=np.float64)
        layer.act = ActQuantState(row["running_max"], row.get("momentum", 0.9))
    target.input_act = ActQuantState(manifest["input_running_max"], manifest.get("input_momentum", 0.9))
    target.eval()
    return target


def write_history_json(path, result: FitResult) -> None:
    Path(path).write_text(json.dumps([asdict(m) for m in result.history], indent=1))
