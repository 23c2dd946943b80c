"""Learning constrained particle dynamics with graph neural ODEs."""

from . import autodiff, config, evaluation, models, nn, physics, training

__all__ = [
    "autodiff",
    "config",
    "evaluation",
    "models",
    "nn",
    "physics",
    "training",
]

__version__ = "0.1.0"
