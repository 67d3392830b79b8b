"""Ternary vision transformers: channel-wise ternarization, min-max 8-bit
activations and progressive 8-bit to ternary quantization-aware training."""

from tervit.autodiff import GradTape, Tensor
from tervit.data import Dataset, load_idx, synthetic_blobs
from tervit.estimators import ChannelTernarizer, MinMax8Quantizer, TerViTClassifier
from tervit.exceptions import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    TerViTError,
    TrainingDivergedError,
)
from tervit.formats import Checkpoint, load_checkpoint, parse_config, save_checkpoint
from tervit.model import SizeReport, ViTConfig, VisionTransformer, model_size_bytes
from tervit.quantization import (
    QuantizationPolicy,
    TernaryTensor,
    dequantize_ternary,
    pack_codes,
    quantize_minmax8,
    ternarize,
    unpack_codes,
)
from tervit.training import TrainSchedule, progressive_train, train_phase

__version__ = "0.1.0"

__all__ = [
    "ChannelTernarizer", "Checkpoint", "ConfigError", "ContractError", "Dataset",
    "DimensionError", "FormatError", "GradTape", "MinMax8Quantizer", "QuantizationPolicy",
    "SizeReport", "Tensor", "TerViTClassifier", "TerViTError", "TernaryTensor",
    "TrainSchedule", "TrainingDivergedError", "ViTConfig", "VisionTransformer",
    "dequantize_ternary", "load_checkpoint", "load_idx", "model_size_bytes", "pack_codes",
    "parse_config", "progressive_train", "quantize_minmax8", "save_checkpoint",
    "synthetic_blobs", "ternarize", "train_phase", "unpack_codes",
]
