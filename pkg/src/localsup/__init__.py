"""Locally supervised training of gradient-isolated convolutional modules.

A numpy-based research library: a small float64 autodiff engine, partitionable
convolutional backbones with gated-attention MIL heads, random feature
reconstruction regularization, greedy per-module training, activation-memory
profiling, and a synthetic bag-classification task generator.
"""

from localsup import tensor
from localsup.tensor import (
    Tensor,
    Parameter,
    Graph,
    no_grad,
    backward,
    detach,
    gradient_check,
)

__version__ = "0.1.0"
