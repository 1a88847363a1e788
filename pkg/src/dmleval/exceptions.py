"""Exception types raised by dmleval."""


class DmlError(ValueError):
    """Base class for all input and validation errors."""


class SchemaError(DmlError):
    """A required column is missing or a role is declared twice."""


class ParseError(DmlError):
    """A cell could not be read as a finite number."""


class ValidationError(DmlError):
    """Data violate a structural requirement (arm counts, shapes, ...)."""


class SupportError(DmlError):
    """Propensities get too close to zero for the overlap requirement."""


class StageError(DmlError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class ConfigError(DmlError):
    """A configuration key or value is invalid."""


class MissingArtifactError(DmlError):
    """A stage needs an upstream file that is not on disk."""
