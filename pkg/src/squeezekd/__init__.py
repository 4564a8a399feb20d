"""Adversarial teacher-student network compression with attention-squeezed
intermediate supervision.

The package is a small numpy-backed library: a reverse-mode autodiff tensor
core, pre-activation residual backbones, the squeeze-attention descriptors,
the composite distillation losses, a two-stage trainer, synthetic/CIFAR-like
data handling, run metrics, and a CLI front end.
"""

from .tensor import Parameter, ShapeError, Tensor

__all__ = ["Tensor", "Parameter", "ShapeError"]
__version__ = "0.1.0"
