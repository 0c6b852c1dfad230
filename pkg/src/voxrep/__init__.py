"""Contrastive pre-training of voxel-level feature-pyramid representations,
with linear/non-linear probing, fine-tuning and Dice evaluation on CT-like
volumes. Hot convolution kernels run through a compiled extension when
available (see ``voxrep.backend``)."""

from . import backend
from .autograd import Tape, Tensor, backward, parameter
from .model import FpnConfig, representation_dim

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "parameter",
    "FpnConfig",
    "representation_dim",
    "backend",
    "__version__",
]
