"""Deformable-convolution segmentation network with a numpy autograd core.

Submodules: ``tensor`` (tape autograd), ``ops`` / ``nn`` (layers), ``dcnv3``,
``arfm``, ``model``, ``losses``, ``metrics``, ``data``, ``optim``,
``trainer``, ``checkpoint``, ``config`` and ``cli``.
"""
from .model import SACNet, SACNetConfig, count_parameters
from .tensor import Tape, Tensor, no_grad, set_precision

__all__ = ["SACNet", "SACNetConfig", "Tape", "Tensor", "count_parameters", "no_grad", "set_precision"]
__version__ = "0.1.0"
