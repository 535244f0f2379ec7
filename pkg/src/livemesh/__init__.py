"""Fully distributed peer-to-peer live streaming: protocol library plus
deterministic discrete-event simulator."""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
