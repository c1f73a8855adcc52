"""Empirical Bayes shrinkage for multivariate normal means.

Observed vectors are modeled as Gaussian measurements, with known noise
covariances, of latent mean vectors drawn from a mixture of zero-mean
multivariate normals.  The package estimates that mixture prior by penalized
maximum likelihood, computes posterior summaries with local false sign
rates, and ships a simulation harness plus a command-line front end.
"""

from .core import (
    ComponentConstraint,
    Dataset,
    FitConfig,
    FitTrace,
    MixturePrior,
    Penalty,
    deserialize_prior,
    load_dataset,
    load_prior,
    save_dataset,
    save_prior,
    serialize_prior,
    validate_dataset,
)
from .exceptions import (
    DimensionMismatchError,
    EbmnmError,
    EmptyDataError,
    InvalidConfigError,
    InvalidScenarioError,
    InvariantViolationError,
    MalformedInputError,
    NotPositiveDefiniteError,
    NumericalFailureError,
    SingularMatrixError,
    UnsupportedNoiseError,
    UnsupportedPenaltyError,
)
from .mixture import FitResult, fit, log_likelihood, random_init, responsibilities
from .posterior import PosteriorMixture, PosteriorSummary, lfsr, posterior_mixture, summarize
from .sim import (
    EvalReport,
    GroundTruth,
    Scenario,
    empirical_fsr,
    generate,
    kl_divergence,
    power_fsr_curve,
)

__version__ = "0.1.0"

__all__ = [
    "ComponentConstraint",
    "Dataset",
    "EvalReport",
    "FitConfig",
    "FitResult",
    "FitTrace",
    "GroundTruth",
    "MixturePrior",
    "Penalty",
    "PosteriorMixture",
    "PosteriorSummary",
    "Scenario",
    "DimensionMismatchError",
    "EbmnmError",
    "EmptyDataError",
    "InvalidConfigError",
    "InvalidScenarioError",
    "InvariantViolationError",
    "MalformedInputError",
    "NotPositiveDefiniteError",
    "NumericalFailureError",
    "SingularMatrixError",
    "UnsupportedNoiseError",
    "UnsupportedPenaltyError",
    "deserialize_prior",
    "empirical_fsr",
    "fit",
    "generate",
    "kl_divergence",
    "lfsr",
    "load_dataset",
    "load_prior",
    "log_likelihood",
    "posterior_mixture",
    "power_fsr_curve",
    "random_init",
    "responsibilities",
    "save_dataset",
    "save_prior",
    "serialize_prior",
    "summarize",
    "validate_dataset",
    "__version__",
]
