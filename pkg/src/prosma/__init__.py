"""Proximal-sparse skip gating for U-Net segmentation, on a small NumPy autodiff core."""

from .errors import ContractError, FormatError, ProsmaError, ShapeError
from .gate import VARIANTS, GateParams, GateTrace, prosma_gate, soft_threshold
from .model import ModelConfig, ModelParams, forward, init_params
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ContractError", "FormatError", "ProsmaError", "ShapeError",
    "VARIANTS", "GateParams", "GateTrace", "prosma_gate", "soft_threshold",
    "ModelConfig", "ModelParams", "forward", "init_params",
    "Tensor", "backward", "no_grad",
]
