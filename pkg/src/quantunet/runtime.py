"""Integer-only inference over an exported, bit-packed U-Net.

Every conv and transposed conv multiplies integer activations by integer
weights into int64 accumulators, adds an int32 bias that already sits on the
accumulator grid ``s_x * s_w``, and requantizes to the next activation grid
with a single double-precision multiply and round-half-even. Max-pooling and
concatenation work on integers. Only the final sigmoid is real-valued.

File layout (all integers little-endian)::

    b"QUNT" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | blob

The blob holds each layer's weights packed LSB-first as ``b_eff``-bit two's
complement, in manifest order, every layer starting on a byte boundary.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ExportError, ShapeError
from .model import QuantUNet, UNetConfig, layer_plan
from .packing import pack_bits, packed_size, unpack_bits
from .quant import INT32_MAX, act_qmax, quantize_weight_int, weight_meta
from .tensor import no_grad

MAGIC = b"QUNT"
VERSION = 1
_HEADER = struct.Struct("<4sII")
INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class IntLayer:
    name: str
    kind: str  # conv3, convT or head
    shape: tuple
    b_eff: int
    s_w: float
    s_x: float
    s_y: float
    q_max: int  # clamp bound of the output grid
    signed: bool
    weights: np.ndarray = field(repr=False, compare=False)  # int32, logical shape ``shape``
    bias: np.ndarray = field(repr=False, compare=False)  # int32, on the s_x * s_w grid

    @property
    def n_weights(self) -> int:
        return int(np.prod(self.shape))

    @property
    def multiplier(self) -> float:
        return self.s_x * self.s_w / self.s_y

    def acc_bound(self, q_in: int) -> int:
        """Worst-case |accumulator| for inputs bounded by ``q_in``."""
        q_w = 2 ** (self.b_eff - 1) - 1
        fan_in = self.n_weights // (self.shape[1] if self.kind == "convT" else self.shape[0])
        return fan_in * q_in * q_w + int(np.max(np.abs(self.bias), initial=0))


@dataclass(frozen=True)
class IntModel:
    config: UNetConfig
    input_scale: float
    layers: tuple
    meta: dict = field(default_factory=dict, compare=False)  # free-form, e.g. preprocessing size

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {layer.name: layer for layer in self.layers})

    def layer(self, name: str) -> IntLayer:
        return self._by_name[name]

    @property
    def act_bits(self) -> int:
        return self.config.act_bitwidth


# -- export --------------------------------------------------------------
def _check_ready(model: QuantUNet) -> None:
    if not model.config.quantized:
        raise ExportError("export needs a quantized model (config.quantized is false)")
    thawed = [name for name, st in model.act_states() if not st.frozen]
    if thawed:
        raise ExportError(f"activation statistics are not frozen (call model.eval()): {', '.join(thawed[:3])}")


def export_int_model(model: QuantUNet, calibration=None, meta: Optional[dict] = None) -> IntModel:
    """Freeze a trained model into integer weights, biases and scales.

    ``calibration`` is an input batch run through the eval forward once to set
    any activation range that was never observed; frozen ranges stay as they are.
    """
    _check_ready(model)
    missing = [name for name, st in model.act_states() if st.running_max is None and name != "outseg"]
    if missing:
        if calibration is None:
            raise ExportError(f"activation scales are unset and no calibration batch was given: {missing[0]}")
        with no_grad():
            model.forward(np.asarray(calibration, dtype=np.float32), training=False)

    cfg = model.config
    bits = cfg.act_bitwidth
    u_max, s_max = act_qmax(bits, False), act_qmax(bits, True)
    s_in = model.input_act.scale(bits, False)
    layers = []
    s = s_in
    skips = {}

    def add(name: str, s_x: float, s_y: Optional[float]) -> float:
        src = model.by_name[name]
        w = src.weight.data.astype(np.float64)
        wm = weight_meta(w, src.qparams.b_eff)
        if src.kind == "head":
            s_y, q_max, signed = s_x * wm.scale, INT32_MAX, True
        elif src.kind == "convT":
            q_max, signed = s_max, True
        else:
            q_max, signed = u_max, False
        bias = np.clip(np.round(src.bias.data.astype(np.float64) / (s_x * wm.scale)), -INT32_MAX, INT32_MAX)
        layers.append(IntLayer(name, src.kind, tuple(w.shape), wm.b_eff, wm.scale, s_x, s_y, q_max, signed,
                               quantize_weight_int(w, wm), bias.astype(np.int32)))
        return s_y

    act = lambda name, signed=False: model.by_name[name].act.scale(bits, signed)
    for k in range(1, cfg.depth + 1):
        s = add(f"enc{k}.conv1", s, act(f"enc{k}.conv1"))
        s = add(f"enc{k}.conv2", s, act(f"enc{k}.conv2"))
        skips[k] = s
    s = add("bottleneck.conv1", s, act("bottleneck.conv1"))
    s = add("bottleneck.conv2", s, act("bottleneck.conv2"))
    for k in range(cfg.depth, 0, -1):
        su = add(f"up{k}", s, act(f"up{k}", True))
        s = max(su, skips[k])
        s = add(f"dec{k}.conv1", s, act(f"dec{k}.conv1"))
        s = add(f"dec{k}.conv2", s, act(f"dec{k}.conv2"))
    add("outseg", s, None)

    m = IntModel(UNetConfig.from_dict(cfg.to_dict()), s_in, tuple(layers), dict(meta or {}))
    check_overflow(m)
    return m


def check_overflow(m: IntModel) -> None:
    """Analytic bound: no accumulator can leave the int64 range."""
    # decoder conv1 also sees the signed upconv branch, but its |q| is below the unsigned bound
    q_in = act_qmax(m.act_bits, False)
    for layer in m.layers:
        bound = layer.acc_bound(q_in)
        if bound > INT64_MAX:
            raise ExportError(f"layer {layer.name}: worst-case accumulator {bound} exceeds int64")


# -- integer inference ---------------------------------------------------
def requantize(acc, multiplier: float, q_max: int, signed: bool = False) -> np.ndarray:
    """clamp(round_half_even(acc * multiplier)) onto [0, q_max] or [-q_max, q_max]."""
    r = np.round(np.asarray(acc, dtype=np.int64).astype(np.float64) * multiplier)
    lo = -q_max if signed else 0
    return np.clip(r, lo, q_max).astype(np.int64)


def _debug() -> bool:
    return os.environ.get("QUNET_DEBUG", "") not in ("", "0")


def _assert_acc(layer: IntLayer, acc: np.ndarray, q_in: int) -> None:
    if _debug():
        peak = int(np.max(np.abs(acc), initial=0))
        assert peak <= layer.acc_bound(q_in), f"{layer.name}: accumulator {peak} above analytic bound"


def _conv3(layer: IntLayer, q: np.ndarray, q_in: int) -> np.ndarray:
    n, c, h, w = q.shape
    cout = layer.shape[0]
    cols = kernels.im2col(np.pad(q.astype(np.int32), ((0, 0), (0, 0), (1, 1), (1, 1))), 3, 3)
    acc = kernels.int_gemm(cols, np.ascontiguousarray(layer.weights.reshape(cout, -1).T))
    acc += layer.bias.astype(np.int64)
    _assert_acc(layer, acc, q_in)
    y = requantize(acc, layer.multiplier, layer.q_max, layer.signed)
    return np.ascontiguousarray(y.reshape(n, h, w, cout).transpose(0, 3, 1, 2), dtype=np.int32)


def _conv_t(layer: IntLayer, q: np.ndarray, q_in: int) -> np.ndarray:
    n, cin, h, w = q.shape
    cout = layer.shape[1]
    xm = np.ascontiguousarray(q.transpose(0, 2, 3, 1).reshape(-1, cin), dtype=np.int32)
    acc = kernels.int_gemm(xm, np.ascontiguousarray(layer.weights.reshape(cin, -1)))  # [NHW, Cout*2*2]
    acc = acc.reshape(n, h, w, cout, 2, 2) + layer.bias.astype(np.int64)[:, None, None]
    _assert_acc(layer, acc, q_in)
    y = requantize(acc, layer.multiplier, layer.q_max, layer.signed)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w), dtype=np.int32)


def _head(layer: IntLayer, q: np.ndarray, q_in: int) -> np.ndarray:
    n, c, h, w = q.shape
    xm = np.ascontiguousarray(q.transpose(0, 2, 3, 1).reshape(-1, c), dtype=np.int32)
    acc = kernels.int_gemm(xm, np.ascontiguousarray(layer.weights.reshape(layer.shape[0], c).T))
    acc += layer.bias.astype(np.int64)
    _assert_acc(layer, acc, q_in)
    return acc.reshape(n, h, w, -1).transpose(0, 3, 1, 2)


def _rescale(q: np.ndarray, s_from: float, s_to: float, q_max: int, signed: bool) -> np.ndarray:
    if s_from == s_to:
        return q
    return requantize(q, s_from / s_to, q_max, signed).astype(np.int32)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def int_forward(m: IntModel, x) -> np.ndarray:
    """Probability map [N, out_channels, H, W] (float64) for real inputs in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    cfg = m.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"int_forward: expected [N,{cfg.in_channels},H,W], got {x.shape}")
    div = 2**cfg.depth
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(f"int_forward: H and W must be divisible by {div}, got {x.shape[2]}x{x.shape[3]}")

    u_max, s_max = act_qmax(cfg.act_bitwidth, False), act_qmax(cfg.act_bitwidth, True)
    q = np.clip(np.round(x / m.input_scale), 0, u_max).astype(np.int32)
    L = m.layer
    skips = {}
    for k in range(1, cfg.depth + 1):
        q = _conv3(L(f"enc{k}.conv1"), q, u_max)
        q = _conv3(L(f"enc{k}.conv2"), q, u_max)
        skips[k] = q
        q, _ = kernels.maxpool2x2(q)
    q = _conv3(L("bottleneck.conv1"), q, u_max)
    q = _conv3(L("bottleneck.conv2"), q, u_max)
    for k in range(cfg.depth, 0, -1):
        up = L(f"up{k}")
        u = _conv_t(up, q, u_max)
        dec = L(f"dec{k}.conv1")
        s_skip = L(f"enc{k}.conv2").s_y
        u = _rescale(u, up.s_y, dec.s_x, s_max, True)
        sk = _rescale(skips[k], s_skip, dec.s_x, u_max, False)
        q = np.concatenate([u, sk], axis=1)
        q = _conv3(dec, q, u_max)
        q = _conv3(L(f"dec{k}.conv2"), q, u_max)
    head = L("outseg")
    acc = _head(head, q, u_max)
    return _sigmoid(acc.astype(np.float64) * head.s_y)


# -- sizes ---------------------------------------------------------------
@dataclass(frozen=True)
class SizeReport:
    weight_bits: int
    bias_bits: int
    float32_bits: int
    ratio: float
    avg_bitwidth: float
    n_weights: int

    @property
    def quantized_bits(self) -> int:
        return self.weight_bits

    def to_dict(self) -> dict:
        return {
            "weight_bits": self.weight_bits,
            "bias_bits": self.bias_bits,
            "float32_bits": self.float32_bits,
            "ratio": self.ratio,
            "avg_bitwidth": self.avg_bitwidth,
            "n_weights": self.n_weights,
        }


def size_report(m: IntModel) -> SizeReport:
    """Weight storage at the learned bitwidths against float32 storage of the same weights."""
    n = sum(layer.n_weights for layer in m.layers)
    bits = sum(layer.n_weights * layer.b_eff for layer in m.layers)
    bias_bits = 32 * sum(int(layer.bias.size) for layer in m.layers)
    return SizeReport(bits, bias_bits, 32 * n, 32 * n / bits, bits / n, n)


# -- serialization -------------------------------------------------------
def manifest(m: IntModel) -> tuple[dict, bytes]:
    entries = []
    chunks = []
    offset = 0
    for layer in m.layers:
        data = pack_bits(layer.weights, layer.b_eff)
        entries.append({
            "name": layer.name,
            "kind": layer.kind,
            "shape": list(layer.shape),
            "b_eff": layer.b_eff,
            "s_w": layer.s_w,
            "s_x": layer.s_x,
            "s_y": layer.s_y,
            "q_max": layer.q_max,
            "signed": layer.signed,
            "offset": offset,
            "length": len(data),
            "bits": layer.n_weights * layer.b_eff,
            "bias": [int(v) for v in layer.bias],
        })
        chunks.append(data)
        offset += len(data)
    doc = {"config": m.config.to_dict(), "input_scale": m.input_scale, "layers": entries, "meta": m.meta}
    return doc, b"".join(chunks)


def to_bytes(m: IntModel) -> bytes:
    doc, blob = manifest(m)
    text = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + blob


def save_int_model(m: IntModel, path) -> int:
    """Write the model file; returns its size in bytes."""
    data = to_bytes(m)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


def from_bytes(data: bytes) -> IntModel:
    if len(data) < _HEADER.size:
        raise ExportError(f"model file truncated: {len(data)} bytes")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ExportError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ExportError(f"unsupported model format version {version}")
    start = _HEADER.size + n
    if len(data) < start:
        raise ExportError("model file truncated inside the manifest")
    try:
        doc = json.loads(data[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ExportError(f"unreadable manifest: {exc}") from exc
    blob = data[start:]
    cfg = UNetConfig.from_dict(doc["config"])
    expected = [name for name, _, _ in layer_plan(cfg)]
    names = [e["name"] for e in doc["layers"]]
    if names != expected:
        raise ExportError("manifest layer table does not match the architecture in its config")
    layers = []
    for e in doc["layers"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape))
        chunk = blob[e["offset"]:e["offset"] + e["length"]]
        if len(chunk) != e["length"] or e["length"] != packed_size(count, e["b_eff"]):
            raise ExportError(f"layer {e['name']}: packed field is truncated or mis-sized")
        w = unpack_bits(chunk, e["b_eff"], count).astype(np.int32).reshape(shape)
        layers.append(IntLayer(e["name"], e["kind"], shape, e["b_eff"], e["s_w"], e["s_x"], e["s_y"], e["q_max"],
                               e["signed"], w, np.asarray(e["bias"], dtype=np.int32)))
    return IntModel(cfg, doc["input_scale"], tuple(layers), doc.get("meta", {}))


def load_int_model(path) -> IntModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ExportError(f"cannot read model file {path}: {exc}") from exc
    return from_bytes(data)


def blob_size(m: IntModel) -> int:
    return sum(packed_size(layer.n_weights, layer.b_eff) for layer in m.layers)


def logical_bits(layers: Sequence[IntLayer]) -> int:
    return sum(layer.n_weights * layer.b_eff for layer in layers)
