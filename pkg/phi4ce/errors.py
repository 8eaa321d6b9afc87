"""
Exception hierarchy for the cluster-expansion lab.

Every failure the library signals on purpose derives from ExpansionError so
the CLI can turn it into a FAIL verdict instead of a crash.
"""


class ExpansionError(Exception):
    """Base class for all errors raised by phi4ce."""


class DomainError(ExpansionError, ValueError):
    """Input outside the mathematical domain of an operation."""


class SingularityError(DomainError):
    """Kernel evaluated where its integral diverges."""


class CapabilityError(ExpansionError):
    """Request exceeds what the desk-scale implementation supports."""


class NonContractionError(ExpansionError, RuntimeError):
    """Fixed-point iteration stopped contracting."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class ConfigError(ExpansionError, ValueError):
    """Malformed configuration value."""
