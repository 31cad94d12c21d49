"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class CloudCarveError(Exception):
    exit_code = 1


class ConfigError(CloudCarveError, ValueError):
    """Invalid configuration, mismatched domains or inconsistent inputs."""

    exit_code = 2


class VolumeFormatError(CloudCarveError, ValueError):
    """A binary volume or depth-map file could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    exit_code = 3

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DomainError(CloudCarveError, ValueError):
    """Numeric input outside the domain of an operation (non-finite wind, depth <= 0, ...)."""

    exit_code = 4


class PipelineError(CloudCarveError):
    """Wraps a failure inside a pipeline stage, naming the stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"pipeline stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3 if isinstance(cause, OSError) else 1)
