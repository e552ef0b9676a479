"""Ensemble Kalman variational objectives for state-space models.

Submodules are imported on first attribute access so that the CLI can set
thread-count environment variables before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("autodiff", "distributions", "filters", "models", "data", "objectives",
               "training", "gradvar", "config", "storage", "plotting", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
