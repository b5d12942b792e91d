"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad key, bad value, dim mismatch)."""


class IngestError(ValueError):
    """Dataset could not be ingested (empty stream, malformed record)."""


class TransportError(RuntimeError):
    """A remote call failed after all retry attempts."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class EnvProtocolError(RuntimeError):
    """A remote environment returned a payload we could not interpret."""

    def __init__(self, message: str, payload=None):
        super().__init__(message)
        self.payload = payload


class TrainingError(RuntimeError):
    """An invariant was violated while preparing or replaying experience."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss or gradient."""
