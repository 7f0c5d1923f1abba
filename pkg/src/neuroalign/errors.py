"""Exception hierarchy shared across the package."""


class NeuroalignError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(NeuroalignError):
    """Invalid value passed to a constructor or operation."""


class FormatError(NeuroalignError):
    """On-disk artifact is malformed (wrong dtype, shape, or schema)."""


class IntegrityError(NeuroalignError):
    """Cross-references in a dataset or checkpoint do not resolve."""


class ConfigurationError(NeuroalignError):
    """Model/operation configuration is inconsistent with its inputs."""


class NormalizationError(ValidationError):
    """A vector that must be normalizable has zero norm."""


class NumericsError(NeuroalignError):
    """Non-finite values surfaced during computation."""


class NotFittedError(NeuroalignError):
    """A component that requires training was used before being trained."""


class StageOrderError(NeuroalignError):
    """Staged training invoked out of order."""
