"""Desk-scale workbench for speaker-targeted audio-visual speech
recognition on simulated two-speaker cocktail-party audio.

The package covers the full pipeline: corpus synthesis and mixture
simulation (`synth`, `corpus`), feature assembly (`features`), a
from-scratch feed-forward acoustic model with three speaker-identity
fusion variants (`nnet`), grammar-constrained Viterbi decoding and WER
scoring (`decoder`), and experiment orchestration (`pipeline`, `cli`).
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    AvasrError,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
)
