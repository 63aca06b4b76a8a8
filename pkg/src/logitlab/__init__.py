"""Laboratory for logit-regularized classifiers and their attack evaluation."""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
