"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ValidationError/ConfigurationError -> 2,
DivergenceError -> 3, StorageError -> 4.
"""


class GraphRomError(Exception):
    """Base class for all package errors."""


class ValidationError(GraphRomError):
    """Structurally invalid input (bad edges, shape mismatch, bad config values)."""


class ConfigurationError(ValidationError):
    """Invalid run configuration (empty split, bad ratios, missing sections)."""


class GeometryError(ValidationError):
    """Invalid geometry (zero-length edge, hole outside admissible range)."""


class DivergenceError(GraphRomError):
    """Non-finite values produced during time stepping or training."""


class StorageError(GraphRomError):
    """Corrupt, truncated, or incompatible on-disk artifacts."""
