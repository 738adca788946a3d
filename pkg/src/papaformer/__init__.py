"""Parallel-path decoder-only transformer toolkit."""

from papaformer.tensor import RngState, Tensor

__all__ = ["Tensor", "RngState"]
__version__ = "0.1.0"
