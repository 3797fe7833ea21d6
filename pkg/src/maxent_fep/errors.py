"""Exception hierarchy shared by all modules."""


class MaxEntFEPError(Exception):
    """Base class for every error raised by this package."""


class NumericInputError(MaxEntFEPError, ValueError):
    """Input contains NaN or Inf."""


class InvariantViolationError(MaxEntFEPError, ValueError):
    """A value breaks a type invariant (e.g. an unnormalised density)."""


class SupportMismatchError(MaxEntFEPError, ValueError):
    """One density puts mass where the other has (numerically) none."""


class DimensionalityError(MaxEntFEPError, ValueError):
    """Shapes, grids or block dimensions do not agree."""


class DegenerateRegionError(MaxEntFEPError, ValueError):
    """A region carries zero probability mass."""


class DomainError(MaxEntFEPError, ValueError):
    """A point or path lies outside the grid."""


class ScalingError(MaxEntFEPError, ArithmeticError):
    """Partition function under- or overflowed."""


class FeasibilityError(MaxEntFEPError, ValueError):
    """A moment target lies outside the attainable range."""


class DegenerateConstraintError(MaxEntFEPError, ValueError):
    """Constraints are collinear, so the dual Hessian is singular."""


class StabilityError(MaxEntFEPError, ValueError):
    """Step size violates the stability bound of an explicit scheme."""


class ConservationError(MaxEntFEPError, ArithmeticError):
    """Total probability drifted beyond tolerance."""


class WindowError(MaxEntFEPError, ValueError):
    """Not enough samples or snapshots for the requested statistic."""


class DegeneracyError(MaxEntFEPError, ValueError):
    """Covariance block is singular."""


class NonInjectiveSyncError(MaxEntFEPError, ValueError):
    """The blanket-to-expectation map is not injective, so no inverse exists."""


class OptimizationError(MaxEntFEPError, RuntimeError):
    """Iterative minimiser failed to converge."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class DegenerateContourError(MaxEntFEPError, ValueError):
    """Gradient vanishes along an isocontour, so the tangent is undefined."""


class RegionShapeError(MaxEntFEPError, ValueError):
    """Region is not a sublevel set of the potential."""


class ConfigError(MaxEntFEPError, ValueError):
    """Scenario configuration failed validation."""
