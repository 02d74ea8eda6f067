"""Learnable-bitwidth quantization-aware U-Net training and integer inference."""
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    ExportError,
    IngestionError,
    PackError,
    QuantUNetError,
    ReportError,
    ShapeError,
    SplitError,
    TrainingError,
)
from .kernels import BACKEND
from .losses import bce_loss, dice_coeff, dice_loss, total_loss
from .model import QuantUNet, UNetConfig, build, param_count, quant_layer_names
from .packing import pack_bits, unpack_bits
from .runtime import IntModel, export_int_model, int_forward, load_int_model, save_int_model, size_report
from .tensor import Tensor, no_grad
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
