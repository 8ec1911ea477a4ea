"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ValidationError -> 1,
ProtocolError -> 3, anything else derived from HistotypeError -> 2.
"""

from __future__ import annotations


class HistotypeError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(HistotypeError):
    """Bad user input: config values, manifests, malformed CSV rows."""


class ConfigError(ValidationError):
    """Config file cannot be parsed or fails validation."""


class ManifestError(ValidationError):
    """Cohort or tile manifest violates its format contract."""


class PipelineError(HistotypeError):
    """Runtime failure inside a stage (missing inputs, degenerate data)."""


class StageInputError(PipelineError):
    """A stage's declared inputs are absent; an earlier stage must run first."""


class DegenerateInputError(PipelineError):
    """Input carries no usable signal (blank tile, single-stain image, ...)."""


class ModelFormatError(PipelineError):
    """Serialized model is corrupt or has an unsupported version."""


class ProtocolError(HistotypeError):
    """External scorer violated the line protocol."""


class IncompleteScoresError(ProtocolError):
    """Scorer session ended with unscored tiles; ids are preserved."""

    def __init__(self, message: str, unscored: list[str]):
        super().__init__(message)
        self.unscored = list(unscored)
