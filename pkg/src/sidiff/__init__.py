"""Generative next-item recommendation with masked diffusion over semantic IDs."""

from sidiff.errors import ConfigError, DataError, SidiffError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "SidiffError", "__version__"]
