"""Exception hierarchy shared by every subsystem.

The CLI maps the three top-level families to exit codes: ``ConfigError`` -> 1,
``DataError`` -> 2, ``BackendError`` -> 3.
"""

from __future__ import annotations


class RecsimError(Exception):
    """Base class for all package errors."""


class ConfigError(RecsimError):
    pass


class DataError(RecsimError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class InsufficientHistoryError(DataError):
    pass


class SamplingError(DataError):
    pass


class BackendError(RecsimError):
    """Transport-level exhaustion or an unusable backend."""


class CacheMissError(BackendError):
    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"replay cache miss for request digest {digest}")


class MalformedOutputError(BackendError):
    def __init__(self, message: str, attempts: list[str]):
        self.attempts = list(attempts)
        super().__init__(f"{message} (after {len(attempts)} attempts)")


class StageError(RecsimError):
    """A profile-pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class DecisionError(RecsimError):
    pass
