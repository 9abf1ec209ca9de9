"""Exception hierarchy shared across the toolkit.

Every error carries an ``exit_code`` so the command line layer can map
failures onto stable process exit codes without a big lookup table:

* 2 -- bad usage or input validation (shapes, ranks, rates, budgets)
* 3 -- numerical failure (non-finite input, no convergence, not SPD)
* 4 -- I/O and container format problems
"""

from __future__ import annotations


class VecforgeError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ValidationError(VecforgeError):
    exit_code = 2


class NumericalError(VecforgeError):
    exit_code = 3


class IoError(VecforgeError):
    exit_code = 4


# --- container / tensor store ---------------------------------------------

class MalformedHeader(IoError):
    """Container header is unparseable or internally inconsistent."""


class ShapeMismatch(IoError):
    """Declared byte ranges disagree with dtype and shape."""


class DuplicateName(IoError):
    """Two tensor records share a name."""


class IoFailure(IoError):
    """Underlying file read or write failed."""


# --- validation -------------------------------------------------------------

class DimensionMismatch(ValidationError):
    """Operands have incompatible dimensions."""


class RankOutOfRange(ValidationError):
    """Requested rank is negative or exceeds the available spectrum."""


class InvalidRate(ValidationError):
    """Drop rate outside [0, 1)."""


class InvalidBudget(ValidationError):
    """Rank budget parameters outside 0 < gamma <= rho <= 1."""


class EmptyStream(ValidationError):
    """Activation stream contains no batches."""


class IncompatibleTopology(ValidationError):
    """Checkpoints do not share tensor names and shapes."""


class MissingCovariance(ValidationError):
    """A linear layer has no covariance entry."""


class AllExempt(ValidationError):
    """Every task is already assigned full rank."""


# --- numerics ---------------------------------------------------------------

class NonFinite(NumericalError):
    """Input contains NaN or infinity."""


class NoConvergence(NumericalError):
    """Iterative factorization failed to converge."""


class NotPositiveDefinite(NumericalError):
    """Matrix is not positive definite where one is required."""


class Degenerate(NumericalError):
    """Covariance is degenerate (zero trace) and no fallback was allowed."""
