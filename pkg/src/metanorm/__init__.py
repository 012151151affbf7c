"""Normalization layers for episodic meta-learning on a small numpy autodiff core."""

from .norm import KINDS, NormLayer, NormScheme
from .tensor import Parameter, Tape, Tensor, backward

__all__ = ["KINDS", "NormLayer", "NormScheme", "Parameter", "Tape", "Tensor", "backward"]
__version__ = "0.1.0"
