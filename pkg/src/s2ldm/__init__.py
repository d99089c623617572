"""Latent-diffusion NCCT -> CECT translation on synthetic phantoms, in numpy."""
from .errors import CorruptCheckpointError, DivergenceError, UndefinedMetricError, UnsupportedVersionError

__version__ = "0.1.0"

__all__ = ["CorruptCheckpointError", "DivergenceError", "UndefinedMetricError",
           "UnsupportedVersionError", "__version__"]
