"""Ternary weight networks with trained scaling coefficients.

Training-time quantizers, a 2-bit packed model format, and a forward-only
runtime that skips zero weights and spends two multiplications per output
element.
"""

from ternq.layers import ConvLayer, DenseLayer, LayerSpec, Model, ModelSpec, build_model
from ternq.quantizers import (
    ConstantFactor,
    ConstantSparsity,
    QuantizerKind,
    TernaryCodebook,
    TernaryPartition,
)
from ternq.tensor import Tensor
from ternq.training import TrainConfig, TrainReport, evaluate, finetune_from, sparsity_sweep, train

__version__ = "0.1.0"

__all__ = [
    "ConstantFactor",
    "ConstantSparsity",
    "ConvLayer",
    "DenseLayer",
    "LayerSpec",
    "Model",
    "ModelSpec",
    "QuantizerKind",
    "Tensor",
    "TernaryCodebook",
    "TernaryPartition",
    "TrainConfig",
    "TrainReport",
    "build_model",
    "evaluate",
    "finetune_from",
    "sparsity_sweep",
    "train",
    "__version__",
]
