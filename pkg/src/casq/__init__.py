"""Sequence-to-sequence toolkit built on a small float64 autodiff core.

Encoder-decoder models where the self-attention sublayer can be swapped
for lightweight or dynamic convolutions (including variants that also
convolve over feature channels), trained jointly with a CTC objective
and decoded by joint label-synchronous beam search.
"""

from .errors import (
    CasqError,
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    TrainingDiverged,
    VocabError,
)
from .tensor import Tensor, backward, no_grad

__all__ = [
    "CasqError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "NumericError",
    "TrainingDiverged",
    "VocabError",
    "Tensor",
    "backward",
    "no_grad",
]
