"""Desk-scale CPU inference and verification engine for an all-in-one
image-restoration network that pairs a four-direction selective-scan branch
with transposed channel attention, fused by a dual-interaction module and
steered by spatial-channel prompts."""

__version__ = "0.1.0"

from .errors import (
    CheckFailure,
    ConfigError,
    FormatError,
    MtairError,
    NonFiniteError,
    ShapeError,
)
from .tape import Gradients, Tape
from .tensor import ConvWeights, Tensor

__all__ = [
    "CheckFailure",
    "ConfigError",
    "ConvWeights",
    "FormatError",
    "Gradients",
    "MtairError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "__version__",
]
