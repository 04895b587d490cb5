"""Semi-supervised multi-label learning with dual-decoupled heads and
metric-adaptive pseudo-label thresholds, at desk scale on numpy."""

from d2lmat.errors import ConfigError, D2LError, DataError, DimensionError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "D2LError",
    "DataError",
    "DimensionError",
    "ValidationError",
    "__version__",
]
