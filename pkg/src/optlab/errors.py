"""Exception types shared across the package.

Every error the library raises deliberately derives from OptlabError so
callers can catch one base class at the CLI boundary.  Divergence during
training is *not* an exception (runs record it and keep going); these types
cover contract violations and unrecoverable input problems.
"""

from __future__ import annotations


class OptlabError(Exception):
    """Base class for all deliberate optlab errors."""


class ShapeMismatch(OptlabError):
    """Operands of a tensor op have incompatible shapes."""


class NonFinite(OptlabError):
    """An operation produced NaN or Inf where finite values are required."""


class GraphConsumed(OptlabError):
    """backward() was called on a graph whose buffers were already freed."""


class ZeroGradient(OptlabError):
    """Normalized direction requested for an exactly zero gradient."""


class SchemaError(OptlabError):
    """A config document violates the schema.

    ``path`` is the dotted location of the offending field, e.g.
    ``optimizer.beta2`` or ``problem.corpus`` (empty string for the root).
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


class IdxFormatError(OptlabError):
    """An IDX file has a bad magic number or is truncated."""


class TrimTooLarge(OptlabError):
    """Even division would discard more than the allowed fraction of data."""


class LadderTooTall(OptlabError):
    """The batch-size ladder does not fit under the dataset size."""


class AllDiverged(OptlabError):
    """Every step size in a grid search diverged."""


class BatchTooLarge(OptlabError):
    """A requested minibatch exceeds the number of available examples."""


class DegenerateFit(OptlabError):
    """A fitted Gaussian has zero standard deviation, so quantiles collapse."""


class InsufficientSamples(OptlabError):
    """Too few values for the requested statistic to be meaningful."""


class EmptySelection(OptlabError):
    """A plot filter matched no rows, so there is nothing to draw."""
