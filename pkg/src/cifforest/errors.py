"""Exception types shared across the package.

ValidationError and subclasses map to CLI exit code 1; EstimationError maps
to exit code 2.
"""


class ValidationError(ValueError):
    """Input data or parameters violate a documented precondition."""


class SchemaError(ValidationError):
    """A required column or field is missing or misnamed."""


class ParseError(ValidationError):
    """A field could not be parsed as the expected numeric type."""


class ParameterError(ValidationError):
    """A tuning or model parameter is out of its admissible range."""


class ConfigurationError(ValidationError):
    """Mutually inconsistent inputs (e.g. mismatched grids, missing nuisance)."""


class EstimationError(RuntimeError):
    """An estimate is undefined for the given data (e.g. no uncensored records)."""
