"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes (config 2, verification 3, data/format 4).
"""


class EmbhistError(Exception):
    """Base class for all package errors."""


class DimensionError(EmbhistError):
    """Shape or dimension mismatch between numeric operands."""


class SchemaError(EmbhistError):
    """Unknown variable/feature, overlapping variable sets, or invalid schema."""


class ConfigError(EmbhistError):
    """Invalid or inconsistent configuration."""


class DataError(EmbhistError):
    """Empty or degenerate data where the operation needs substance."""


class FormatError(EmbhistError):
    """Malformed on-disk artifact (bad magic, truncation, corrupt record)."""


class SizeError(EmbhistError):
    """Enumeration budget exceeded."""


class NumericError(EmbhistError):
    """Non-finite values or numerically impossible results."""


class DomainError(EmbhistError):
    """Inputs outside the mathematical domain of a closed-form expression."""


class ContractViolation(EmbhistError):
    """An internal API contract was broken (e.g. stale backward tape)."""


class VerificationError(EmbhistError):
    """A theory identity/inequality check failed."""


class MetricError(EmbhistError):
    """Metric undefined for the given inputs (single-class labels etc.)."""
