"""Gated residual edits for selective concept erasure on synthetic cross-attention stacks."""

__version__ = "0.1.0"

from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]
