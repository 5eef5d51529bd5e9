"""Exception types shared across the package."""


class SswateError(Exception):
    """Base class for package errors."""


class DataError(SswateError):
    """Malformed input data or violated dataset invariants."""


class SpecError(SswateError):
    """Invalid model specification or spec/data mismatch."""


class FitError(SswateError):
    """Model fitting failed."""


class NonConvergenceError(FitError):
    """Newton iterations exhausted before the score tolerance was met."""


class SeparationError(FitError):
    """Coefficients diverged while the score stayed above tolerance."""


class RankDeficiencyError(FitError):
    """Design matrix is rank deficient."""


class EmptyCellError(FitError):
    """A (Y, A) cell of the validation subset holds no observations."""


class SingularDenominatorError(SswateError):
    """A per-unit weighting denominator is numerically zero (IA4 violation)."""


class EstimationError(SswateError):
    """Estimator could not produce a usable result."""


class SimulationError(SswateError):
    """A simulation study could not be carried out."""
