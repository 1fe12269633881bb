"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: configuration errors
exit 2, schema/data errors exit 3, estimation errors exit 4.
"""


class MedtransportError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MedtransportError):
    """Invalid parameters or run configuration."""


class SchemaError(MedtransportError):
    """Input file does not match the expected schema."""


class DataValidationError(MedtransportError):
    """Row-level validation failure in input data."""


class EstimationError(MedtransportError):
    """Base class for failures inside the estimation pipeline."""


class CalibrationError(EstimationError):
    """Missingness strength could not be calibrated to the requested proportion."""


class SingularDesignError(EstimationError):
    """Rank-deficient design matrix."""


class SeparationError(EstimationError):
    """Logistic fit failed to converge (perfect or quasi-separation)."""


class DegenerateDensityError(EstimationError):
    """A conditional density with zero residual spread was evaluated."""


class PositivityError(EstimationError):
    """A weight denominator factor collapsed to zero."""


class TargetingError(EstimationError):
    """The targeting step received no usable weights."""


class StratumError(EstimationError):
    """A required data stratum is empty."""


class BootstrapError(EstimationError):
    """Bootstrap resampling could not produce valid replicates."""
