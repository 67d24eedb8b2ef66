"""Exception hierarchy shared across the package."""


class TrialCeaError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(TrialCeaError):
    """A required column is absent or the column mapping is malformed."""


class ValidationError(TrialCeaError):
    """Input data violate a documented precondition."""


class SingularityError(TrialCeaError):
    """A design or covariance matrix is numerically rank deficient.

    `columns` names the offending design columns when known.
    """

    def __init__(self, message, columns=None):
        super().__init__(message)
        self.columns = list(columns) if columns is not None else []


class SeparationError(TrialCeaError):
    """Logistic MLE lies on the boundary (perfect or quasi-perfect prediction)."""


class ConvergenceError(TrialCeaError):
    """An iterative fit did not reach its tolerance.

    For MCMC fits, `draws` retains the sampled traces for inspection.
    """

    def __init__(self, message, draws=None):
        super().__init__(message)
        self.draws = draws


class InstrumentError(TrialCeaError):
    """Randomised assignment does not predict treatment receipt."""


class PositivityError(TrialCeaError):
    """An estimated observation probability is zero for an observed unit."""


class ImputationError(TrialCeaError):
    """The imputation engine cannot proceed (e.g. too few donors)."""


class RatioUndefinedError(TrialCeaError):
    """A cost-effectiveness ratio is undefined (zero incremental effect)."""
