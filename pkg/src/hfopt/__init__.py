"""Second-order network training accelerated by quasi-Newton-preconditioned
flexible conjugate gradients and adaptive data-sampling schedules."""

from . import cli, corpus, hf, krylov, model, precond, sampling
from .errors import (
    ConfigurationError,
    CorpusFormatError,
    InsufficientSampleError,
    NumericError,
    PreconditionerNotSpdError,
)

__all__ = [
    "cli",
    "corpus",
    "hf",
    "krylov",
    "model",
    "precond",
    "sampling",
    "ConfigurationError",
    "CorpusFormatError",
    "InsufficientSampleError",
    "NumericError",
    "PreconditionerNotSpdError",
]

__version__ = "0.1.0"
