"""Self-supervised image+video representation learning on synthetic person scenes."""

__version__ = "0.1.0"

from .backend import BACKEND
from .tensor import Tensor, Tape, backward, finite_diff_check, no_grad, record

__all__ = [
    "BACKEND",
    "Tensor",
    "Tape",
    "backward",
    "finite_diff_check",
    "no_grad",
    "record",
    "__version__",
]
