"""U-Net builder with optional learnable-bitwidth fake quantization.

Layout follows the classic encoder/bottleneck/decoder U-Net: ``depth``
encoder blocks (two 3x3 conv + ReLU each, then 2x2 max-pool), a bottleneck
block, ``depth`` decoder stages (2x2 stride-2 transposed conv, concat with the
encoder skip, conv block), and a 1x1 conv + sigmoid head. With depth 4 that is
18 block convs + 4 transposed convs + 1 head = 23 weight layers.

In quantized mode every weight layer consumes fake-quantized weights and
biases (biases on the ``input scale * weight scale`` accumulator grid), the
network input and every ReLU output are fake-quantized unsigned, transposed
conv outputs are fake-quantized signed, and the two concat branches are
snapped onto the larger of their two scales so an integer runtime can join
them with one requantization each. Head logits stay on the accumulator grid
and go through a real-valued sigmoid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .quant import (
    ActQuantState,
    QuantParams,
    avg_bitwidth,
    fake_quant_activation,
    fake_quant_bias,
    fake_quant_weight,
    quantize_with_scale,
)
from .tensor import Tensor, parameter


@dataclass
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 64
    depth: int = 4
    out_channels: int = 1
    quantized: bool = True
    act_bitwidth: int = 8
    init_bitwidth: float = 4.0
    act_clip_grad: bool = False  # zero activation gradients outside the running range

    def validate(self) -> None:
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be >= 1")
        if not 2 <= self.act_bitwidth <= 16:
            raise ConfigError(f"act_bitwidth must be in [2, 16], got {self.act_bitwidth}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


@dataclass
class Layer:
    """One weight layer. ``kind`` is ``conv3``, ``convT`` or ``head``."""

    name: str
    kind: str
    weight: Tensor
    bias: Tensor
    qparams: QuantParams
    act: ActQuantState = field(default_factory=ActQuantState)

    @property
    def out_signed(self) -> bool:
        return self.kind != "conv3"

    @property
    def param_count(self) -> int:
        return int(self.weight.data.size + self.bias.data.size)


def layer_plan(cfg: UNetConfig) -> list[tuple[str, str, tuple]]:
    """(name, kind, weight shape) for every weight layer in forward order."""
    b = cfg.base_channels
    plan = []
    cin = cfg.in_channels
    for k in range(1, cfg.depth + 1):
        c = b * 2 ** (k - 1)
        plan.append((f"enc{k}.conv1", "conv3", (c, cin, 3, 3)))
        plan.append((f"enc{k}.conv2", "conv3", (c, c, 3, 3)))
        cin = c
    c = b * 2**cfg.depth
    plan.append(("bottleneck.conv1", "conv3", (c, cin, 3, 3)))
    plan.append(("bottleneck.conv2", "conv3", (c, c, 3, 3)))
    for k in range(cfg.depth, 0, -1):
        c_out = b * 2 ** (k - 1)
        plan.append((f"up{k}", "convT", (c, c_out, 2, 2)))
        plan.append((f"dec{k}.conv1", "conv3", (c_out, 2 * c_out, 3, 3)))
        plan.append((f"dec{k}.conv2", "conv3", (c_out, c_out, 3, 3)))
        c = c_out
    plan.append(("outseg", "head", (cfg.out_channels, c, 1, 1)))
    return plan


def _fan_in(kind: str, shape: tuple) -> int:
    if kind == "convT":
        return shape[0] * shape[2] * shape[3]
    return shape[1] * shape[2] * shape[3]


class QuantUNet:
    def __init__(self, config: UNetConfig, layers: list[Layer]):
        self.config = config
        self.layers = layers
        self.by_name = {layer.name: layer for layer in layers}
        self.input_act = ActQuantState()
        self.training = True

    # -- bookkeeping -----------------------------------------------------
    def quant_layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def quant_params(self) -> list[QuantParams]:
        return [layer.qparams for layer in self.layers]

    def weight_params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def parameters(self) -> list[Tensor]:
        """All trainable tensors: weights, biases, then the bitwidth parameters."""
        return self.weight_params() + [p.b_param for p in self.quant_params()]

    def act_states(self) -> Iterator[tuple[str, ActQuantState]]:
        yield "input", self.input_act
        for layer in self.layers:
            yield layer.name, layer.act

    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def avg_bitwidth(self) -> Tensor:
        return avg_bitwidth(self.quant_params())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "QuantUNet":
        self.training = True
        for _, st in self.act_states():
            st.frozen = False
        return self

    def eval(self) -> "QuantUNet":
        self.training = False
        for _, st in self.act_states():
            st.frozen = True
        return self

    # -- forward ---------------------------------------------------------
    def _act(self, x: Tensor, state: ActQuantState, signed: bool) -> tuple[Tensor, Optional[float]]:
        if not self.config.quantized:
            return x, None
        bits = self.config.act_bitwidth
        y = fake_quant_activation(x, bits, state, self.training, signed, self.config.act_clip_grad)
        return y, state.scale(bits, signed)

    def _weights(self, layer: Layer, in_scale: Optional[float], dtype) -> tuple[Tensor, Tensor]:
        w = layer.weight.astype(dtype)
        b = layer.bias.astype(dtype)
        if not self.config.quantized:
            return w, b
        wq, meta = fake_quant_weight(w, layer.qparams)
        return wq, fake_quant_bias(b, in_scale * meta.scale)

    def _conv_relu(self, name: str, x: Tensor, s: Optional[float]) -> tuple[Tensor, Optional[float]]:
        layer = self.by_name[name]
        w, b = self._weights(layer, s, x.dtype)
        y = F.relu(F.conv2d(x, w, b, padding=1))
        return self._act(y, layer.act, signed=False)

    def _concat(self, up: Tensor, s_up, skip: Tensor, s_skip) -> tuple[Tensor, Optional[float]]:
        if not self.config.quantized:
            return F.concat_channels(up, skip), None
        s = max(s_up, s_skip)
        bits = self.config.act_bitwidth
        if s_up != s:
            up = quantize_with_scale(up, s, bits, True, self.config.act_clip_grad)
        if s_skip != s:
            skip = quantize_with_scale(skip, s, bits, False, self.config.act_clip_grad)
        return F.concat_channels(up, skip), s

    def forward(self, x, training: Optional[bool] = None) -> Tensor:
        """Probability map with the same spatial size as ``x``."""
        if training is not None:
            self.train() if training else self.eval()
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"forward: expected [N,{self.config.in_channels},H,W], got {x.shape}")
        div = 2**self.config.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"forward: H and W must be divisible by {div}, got {x.shape[2]}x{x.shape[3]}")

        depth = self.config.depth
        h, s = self._act(x, self.input_act, signed=False)
        skips = []
        for k in range(1, depth + 1):
            h, s = self._conv_relu(f"enc{k}.conv1", h, s)
            h, s = self._conv_relu(f"enc{k}.conv2", h, s)
            skips.append((h, s))
            h = F.maxpool2d(h)
        h, s = self._conv_relu("bottleneck.conv1", h, s)
        h, s = self._conv_relu("bottleneck.conv2", h, s)
        for k in range(depth, 0, -1):
            up = self.by_name[f"up{k}"]
            w, b = self._weights(up, s, h.dtype)
            u, su = self._act(F.conv_transpose2d(h, w, b), up.act, signed=True)
            skip, ss = skips[k - 1]
            h, s = self._concat(u, su, skip, ss)
            h, s = self._conv_relu(f"dec{k}.conv1", h, s)
            h, s = self._conv_relu(f"dec{k}.conv2", h, s)
        head = self.by_name["outseg"]
        w, b = self._weights(head, s, h.dtype)
        # logits stay on the accumulator grid (input scale * weight scale); no clipping
        return F.sigmoid(F.conv2d(h, w, b, padding=0))

    __call__ = forward


def build(config: UNetConfig, seed: int = 0) -> QuantUNet:
    """Construct a U-Net with He-normal kernels, zero biases, and bitwidths at ``init_bitwidth``."""
    config.validate()
    rng = np.random.default_rng(seed)
    layers = []
    for name, kind, shape in layer_plan(config):
        std = np.sqrt(2.0 / _fan_in(kind, shape))
        w = (rng.standard_normal(shape) * std).astype(np.float32)
        cout = shape[1] if kind == "convT" else shape[0]
        layers.append(
            Layer(
                name=name,
                kind=kind,
                weight=parameter(w),
                bias=parameter(np.zeros(cout, dtype=np.float32)),
                qparams=QuantParams.create(config.init_bitwidth),
            )
        )
    return QuantUNet(config, layers)


def quant_layer_names(model: QuantUNet) -> list[str]:
    return model.quant_layer_names()


def param_count(model: QuantUNet) -> int:
    return model.param_count()
