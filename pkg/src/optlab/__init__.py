"""Deterministic optimizer-comparison lab.

A small, numpy-only stack for studying how optimizer choice interacts with
batch size: an eager reverse-mode autodiff engine, counter-based RNG streams
that make every run bitwise reproducible, a character-level transformer and
MLP, the optimizer family (gradient descent, normalized GD, sign descent,
RMSprop, Adam), gradient-noise analysis, and a sweep harness that grid-tunes
each (optimizer, batch size) cell under iteration-matched budgets.
"""

__version__ = "0.1.0"

from .errors import OptlabError

__all__ = ["OptlabError", "__version__"]
