"""Boundary-aware selective scans and channel state aggregation in NumPy.

Submodules: tensor, io, scan, guidance, posterior, basm, cmsa, metrics and
the training harness in :mod:`csmunet.harness`.
"""

from . import basm, cmsa, guidance, io, metrics, posterior, scan, tensor

__version__ = "0.1.0"
__all__ = ["basm", "cmsa", "guidance", "io", "metrics", "posterior", "scan", "tensor"]
