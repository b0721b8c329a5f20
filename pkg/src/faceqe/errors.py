"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses for it.
"""

from __future__ import annotations


class FaceQEError(Exception):
    exit_code = 1


class ValidationError(FaceQEError, ValueError):
    """Bad input: malformed manifest, config, arguments or preconditions."""

    exit_code = 2


class ImageIOError(FaceQEError, OSError):
    """A file could not be read, decoded or written."""

    exit_code = 3


class NumericError(FaceQEError, ArithmeticError):
    """A computation hit a degenerate case (zero variance, zero vector, ...)."""

    exit_code = 4


class StageError(FaceQEError):
    """Wraps a failure inside one stage of an experiment run."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"[{stage}] {cause}")
