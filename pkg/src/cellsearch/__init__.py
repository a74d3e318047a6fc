"""Differentiable cell-based architecture search for spectrogram-like inputs."""

from . import functional, kernels, optim
from .tensor import Graph, GraphRecord, Parameter, ShapeMismatchError, Tensor

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "GraphRecord",
    "Parameter",
    "ShapeMismatchError",
    "Tensor",
    "functional",
    "kernels",
    "optim",
    "__version__",
]
