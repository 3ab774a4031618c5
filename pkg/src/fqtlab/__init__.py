"""Fully quantized training lab: gradient quantizers and their statistics."""

from fqtlab._accel import backend

__version__ = "0.1.0"

__all__ = ["backend", "__version__"]
