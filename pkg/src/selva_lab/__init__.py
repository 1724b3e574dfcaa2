"""Selective video-to-audio generation, built from scratch on numpy.

The pieces, bottom up: :mod:`tensor` (autodiff), :mod:`world` (toy data),
:mod:`text` and :mod:`video` (encoders), :mod:`generator` (flow matching),
:mod:`trainer`, :mod:`metrics` / :mod:`evaluate` and :mod:`cli`.
"""
from .errors import SelvaError
from .tensor import Tensor, grad_check, layer_norm, scaled_dot_attention, softmax

__version__ = "0.1.0"

__all__ = ["SelvaError", "Tensor", "grad_check", "layer_norm", "scaled_dot_attention", "softmax", "__version__"]
