"""Multi-view perceptron: a generative network with deterministic identity
neurons and sampled view neurons, trained by importance-sampled Monte-Carlo
EM on a synthetic multi-view face-like dataset.

Submodules: ``numerics`` (seeded RNG, eigensolver, log-sum-exp), ``model``,
``training``, ``synthdata``, ``eval``, ``checkpoint`` and ``cli``.
"""

from . import checkpoint, eval, model, numerics, synthdata, training
from .errors import ChecksumError, ContractError, DimensionError, FormatError, MVPError
from .kernels import BACKEND
from .model import Architecture, Parameters
from .numerics import Rng

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Architecture",
    "ChecksumError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "MVPError",
    "Parameters",
    "Rng",
    "checkpoint",
    "eval",
    "model",
    "numerics",
    "synthdata",
    "training",
]
