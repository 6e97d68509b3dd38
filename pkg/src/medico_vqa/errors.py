"""Shared exception types for the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PipelineError):
    """Raster operands have incompatible or degenerate dimensions."""


class ContractError(PipelineError):
    """A caller violated an interface precondition (bad task token, empty input, ...)."""


class ConfigError(PipelineError):
    """Bad configuration: missing credential, unknown key, non-retryable 4xx, ..."""


class TransportError(PipelineError):
    """A remote call failed after exhausting retries."""


class ProtocolError(PipelineError):
    """A remote service replied with a malformed or inconsistent payload."""


class ContentError(PipelineError):
    """A remote service replied successfully but with unusable content."""


class GenerationError(PipelineError):
    """A model backend failed to generate."""


class TokenParseError(PipelineError):
    """Location-token text could not be parsed into a valid sequence."""


class NoParseableRegionError(TokenParseError):
    """Generated text contains no polygon segment with at least 3 vertices."""


class DatasetError(PipelineError):
    """A dataset file is malformed or inconsistent."""


class SampleSkipped(PipelineError):
    """A sample was intentionally skipped; ``reason`` says why."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason
