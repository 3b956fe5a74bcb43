"""Exception types shared across the package.

Each failure family gets its own class so callers (and the CLI exit-code
mapping) can tell configuration mistakes apart from bad data or a diverged
optimization.
"""


class DivnoiseError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DivnoiseError):
    """Invalid or inconsistent run configuration."""


class FormatError(DivnoiseError):
    """Malformed, truncated, or wrong-version binary container."""


class DivergenceError(DivnoiseError):
    """A loss or optimization produced non-finite values."""


class EmptyDatasetError(DivnoiseError, ValueError):
    """A source that should contain images decoded to zero images."""


class DimensionError(DivnoiseError, ValueError):
    """Array shape incompatible with the requested operation."""


class DomainError(DivnoiseError, ValueError):
    """Numeric value outside the mathematically valid domain."""


class InputError(DivnoiseError, ValueError):
    """Arguments that are structurally valid but semantically unusable."""
