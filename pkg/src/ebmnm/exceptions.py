"""Exception hierarchy shared across the package."""


class EbmnmError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(EbmnmError):
    """Array shapes are inconsistent with each other or with the model."""


class NotPositiveDefiniteError(EbmnmError):
    """A matrix that must be positive (semi)definite is not."""


class EmptyDataError(EbmnmError):
    """A dataset with zero observations was supplied."""


class MalformedInputError(EbmnmError):
    """Serialized input could not be parsed."""


class InvariantViolationError(EbmnmError):
    """A constructed or parsed object violates its invariants."""


class UnsupportedNoiseError(EbmnmError):
    """The solver does not support the dataset's noise structure."""


class UnsupportedPenaltyError(EbmnmError):
    """The solver does not support the requested penalty."""


class NumericalFailureError(EbmnmError):
    """A matrix factorization or linear solve failed beyond recovery."""


class InvalidConfigError(EbmnmError):
    """The fit configuration combines unsupported options."""


class InvalidScenarioError(EbmnmError):
    """The simulation scenario parameters are invalid."""


class SingularMatrixError(EbmnmError):
    """An operation requiring strictly positive eigenvalues received a singular matrix."""
