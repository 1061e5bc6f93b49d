"""Stability-based generalization tools for one-step MAML on linear regression tasks."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
