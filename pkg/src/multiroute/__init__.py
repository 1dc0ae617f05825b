"""Desk-scale multi-route detection transformer with a built-in autodiff tape."""

__version__ = "0.1.0"

from . import assignment, autodiff, data, evaluate, geometry, harness, losses, model, optim

__all__ = ["assignment", "autodiff", "data", "evaluate", "geometry", "harness",
           "losses", "model", "optim", "__version__"]
