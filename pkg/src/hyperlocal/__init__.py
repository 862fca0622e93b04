"""Hyperlocal house price indices from sparse transaction streams.

Regions are modelled as AR(1) latent deviations from a global trend, grouped
by a Dirichlet process so that regions in one cluster share a latent factor.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DataError,
    DimensionError,
    HyperlocalError,
    InputError,
    NumericalError,
    SchemaError,
)

__all__ = [
    "__version__",
    "ConfigError",
    "DataError",
    "DimensionError",
    "HyperlocalError",
    "InputError",
    "NumericalError",
    "SchemaError",
]
