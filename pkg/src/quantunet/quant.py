"""Fake quantization with a learnable per-layer weight bitwidth.

Weights use symmetric per-tensor quantization whose scale is recomputed from
``max|W|`` every forward pass. Activations use an EMA running maximum that is
frozen for evaluation and export. Rounding is round-half-to-even everywhere,
with straight-through gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor, parameter

B_MIN = 2.0
B_MAX = 8.0
EPS = 1e-8
INT32_MAX = 2**31 - 1
LN2 = math.log(2.0)


@dataclass
class QuantParams:
    """Learnable continuous bitwidth of one weight layer."""

    b_param: Tensor
    b_min: float = B_MIN
    b_max: float = B_MAX

    @classmethod
    def create(cls, init: float = 4.0) -> "QuantParams":
        return cls(parameter(init, dtype=np.float64))

    @property
    def value(self) -> float:
        return float(self.b_param.data)

    @property
    def clamped(self) -> float:
        return min(max(self.value, self.b_min), self.b_max)

    @property
    def b_eff(self) -> int:
        return int(np.round(self.clamped))


@dataclass(frozen=True)
class QuantMeta:
    scale: float
    q_min: int
    q_max: int
    b_eff: int
    signed: bool


@dataclass
class ActQuantState:
    """Observed range of one activation tensor.

    ``running_max`` is ``None`` until the first batch has been seen; that
    batch's maximum initializes it directly.
    """

    running_max: Optional[float] = None
    momentum: float = 0.9
    frozen: bool = False

    def observe(self, x: np.ndarray, signed: bool) -> None:
        m = float(np.max(np.abs(x))) if signed else float(np.max(x))
        m = max(m, 0.0)
        if self.running_max is None:
            rm = m
        else:
            rm = self.momentum * self.running_max + (1.0 - self.momentum) * m
        self.running_max = max(rm, EPS)

    def scale(self, bits: int, signed: bool) -> float:
        if self.running_max is None:
            raise ContractError("activation scale requested before any calibration data was observed")
        return self.running_max / act_qmax(bits, signed)


def act_qmax(bits: int, signed: bool) -> int:
    return 2 ** (bits - 1) - 1 if signed else 2**bits - 1


def round_ste(x):
    """Round half to even; the gradient passes through unchanged."""
    if not isinstance(x, Tensor):
        return np.round(x)
    return Tensor.from_op(np.round(x.data), (x,), lambda g: (g,), "round_ste")


def effective_bitwidth(p: QuantParams) -> Tensor:
    """Integer bitwidth in {2..8}; gradient 1 strictly inside the rails, 0 on/outside."""
    bp = p.b_param
    v = float(bp.data)
    inside = p.b_min < v < p.b_max
    out = np.asarray(np.round(min(max(v, p.b_min), p.b_max)), dtype=bp.dtype)
    return Tensor.from_op(out, (bp,), lambda g: (g * (1.0 if inside else 0.0),), "effective_bitwidth")


def weight_meta(w: np.ndarray, b_eff: int) -> QuantMeta:
    q = 2 ** (b_eff - 1) - 1
    m = float(np.max(np.abs(w))) if w.size else 0.0
    return QuantMeta(scale=max(m, EPS) / q, q_min=-q, q_max=q, b_eff=b_eff, signed=True)


def quantize_weight_int(w: np.ndarray, meta: QuantMeta) -> np.ndarray:
    """The integer grid values used by the fake quantizer, as int32."""
    u = w.astype(np.float64) / meta.scale
    return np.clip(np.round(u), meta.q_min, meta.q_max).astype(np.int32)


def fake_quant_weight(w: Tensor, p: QuantParams) -> tuple[Tensor, QuantMeta]:
    """Symmetric per-tensor fake quantization at the layer's effective bitwidth.

    The scale is treated as a constant with respect to ``w``. The bitwidth
    gradient flows through the grid size ``Q = 2**(b-1) - 1`` inside the
    scale; saturated elements contribute nothing because ``s * Q`` is fixed.
    """
    v = p.value
    b_eff = p.b_eff
    db_dparam = 1.0 if p.b_min < v < p.b_max else 0.0
    meta = weight_meta(w.data, b_eff)
    s, qmax = meta.scale, meta.q_max
    wd = w.data
    u = wd.astype(np.float64) / s  # same grid as quantize_weight_int, whatever the weight dtype
    r = np.round(u)
    inside = np.abs(r) <= qmax
    wq = (s * np.clip(r, -qmax, qmax)).astype(wd.dtype)
    # dW_q/dQ for interior elements, via ds/dQ = -s/Q and dQ/db = 2**(b-1) ln 2
    dq_db = 2.0 ** (b_eff - 1) * LN2 * db_dparam

    def bw(g):
        gw = g * inside
        gb = None
        if dq_db != 0.0:
            contrib = np.sum(g.astype(np.float64) * np.where(inside, r - u, 0.0), dtype=np.float64)
            gb = np.asarray(contrib * (-s / qmax) * dq_db, dtype=p.b_param.dtype)
        return gw.astype(wd.dtype, copy=False), gb

    return Tensor.from_op(wq, (w, p.b_param), bw, "fake_quant_weight"), meta


def fake_quant_activation(
    x: Tensor,
    bits: int,
    state: ActQuantState,
    training: bool,
    signed: bool = False,
    clip_grad: bool = False,
) -> Tensor:
    """Quantize-dequantize an activation tensor against its running range.

    With ``clip_grad`` the gradient is zeroed where the input lies outside the
    representable range; by default it passes straight through everywhere.
    """
    if (training and not state.frozen) or state.running_max is None:
        state.observe(x.data, signed)
    return quantize_with_scale(x, state.scale(bits, signed), bits, signed, clip_grad)


def quantize_with_scale(x: Tensor, scale: float, bits: int, signed: bool, clip_grad: bool = False) -> Tensor:
    qmax = act_qmax(bits, signed)
    qmin = -qmax if signed else 0
    d = x.data
    q = np.clip(np.round(d / scale), qmin, qmax)
    out = (scale * q).astype(d.dtype)
    if not clip_grad:
        return Tensor.from_op(out, (x,), lambda g: (g,), "fake_quant_act")
    limit = scale * qmax
    mask = (d <= limit) & (d >= (-limit if signed else 0.0))
    return Tensor.from_op(out, (x,), lambda g: (g * mask,), "fake_quant_act")


def fake_quant_bias(b: Tensor, scale: float) -> Tensor:
    """Snap a bias to the accumulator grid ``scale`` (32-bit integers), STE gradient."""
    d = b.data
    q = np.clip(np.round(d.astype(np.float64) / scale), -INT32_MAX, INT32_MAX)
    return Tensor.from_op((q * scale).astype(d.dtype), (b,), lambda g: (g,), "fake_quant_bias")


def avg_bitwidth(params: Sequence[QuantParams]) -> Tensor:
    """Mean of the clamped continuous bitwidths (differentiable)."""
    if not params:
        raise ContractError("avg_bitwidth needs at least one quantized layer")
    n = len(params)
    vals = [p.value for p in params]
    clamped = [min(max(v, p.b_min), p.b_max) for v, p in zip(vals, params)]
    inside = [p.b_min < v < p.b_max for v, p in zip(vals, params)]
    out = np.asarray(sum(clamped) / n, dtype=np.float64)
    inv = 1.0 / n

    def bw(g):
        return tuple(np.asarray(g * inv if ok else 0.0 * g, dtype=np.float64) for ok in inside)

    return Tensor.from_op(out, [p.b_param for p in params], bw, "avg_bitwidth")


def avg_bitwidth_value(params: Sequence[QuantParams]) -> float:
    return float(avg_bitwidth(params).data)


__all__ = [
    "B_MIN",
    "B_MAX",
    "EPS",
    "QuantParams",
    "QuantMeta",
    "ActQuantState",
    "act_qmax",
    "round_ste",
    "effective_bitwidth",
    "weight_meta",
    "quantize_weight_int",
    "fake_quant_weight",
    "fake_quant_activation",
    "quantize_with_scale",
    "fake_quant_bias",
    "avg_bitwidth",
    "avg_bitwidth_value",
]
