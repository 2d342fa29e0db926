"""Exception hierarchy shared by every module.

Each error class carries the CLI exit code it maps to.
"""

from __future__ import annotations


class ShuntError(Exception):
    exit_code = 1


class DomainError(ShuntError, ValueError):
    """Input violates a documented precondition."""


class ConfigurationError(ShuntError):
    pass


class TransportError(ShuntError):
    """A remote backend could not be reached. Retryable."""

    exit_code = 2


class ProtocolError(ShuntError):
    """A remote backend answered with a malformed payload."""

    exit_code = 2


class RoutingError(ShuntError):
    """The large tier failed; ``fallback`` holds the best small-tier outcome."""

    exit_code = 2

    def __init__(self, message: str, fallback=None):
        super().__init__(message)
        self.fallback = fallback


class TrainingError(ShuntError):
    """Training diverged. ``checkpoint`` is the last parameter state with finite loss."""

    exit_code = 3

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class InfeasibleError(ShuntError):
    pass


class StageError(ShuntError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
