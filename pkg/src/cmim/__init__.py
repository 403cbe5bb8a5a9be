"""Contrastive Mutual Information Machine workbench.

A shared encoder-decoder trained under any of five objectives (MIM, cMIM,
VAE, cVAE, InfoNCE), informative-embedding extraction from the decoder's
hidden states, and the full probe-based downstream evaluation protocol,
driven by a reproducible CLI.
"""

__version__ = "0.1.0"

from . import contrastive, data, distributions, evaluation, models, numcore, objectives
from .numcore import Tensor

__all__ = [
    "Tensor",
    "contrastive",
    "data",
    "distributions",
    "evaluation",
    "models",
    "numcore",
    "objectives",
]
