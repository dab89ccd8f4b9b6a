"""Federated re-identification simulator with part-aware clients and
consistency-ratio weighted aggregation."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
