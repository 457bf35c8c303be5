"""Exception hierarchy shared by every plmfusion module."""


class PlmFusionError(Exception):
    """Base class for all package errors."""


class ValidationError(PlmFusionError, ValueError):
    """Input failed a shape, range, or schema check."""


class RateOutOfRangeError(ValidationError):
    """Bandwidth rate exponent outside the admissible interval."""


class SingularDesignError(PlmFusionError, ArithmeticError):
    """A local or global design matrix could not be inverted."""


class RankDeficiencyError(SingularDesignError):
    """Design matrix lacks full column rank.

    Attributes:
        columns: Indices (or names) of the columns implicated in the deficiency.
    """

    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class InfeasibleConstraintError(PlmFusionError):
    """External evidence incompatible with internal data (EL constraint infeasible)."""


class NegativeVarianceError(PlmFusionError, ArithmeticError):
    """A sandwich variance produced a negative diagonal entry."""


class ConvergenceError(PlmFusionError):
    """An iterative solver ran out of iterations."""
