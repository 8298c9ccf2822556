"""Selective state-space (MedMamba) classification of Gleason-grade patches,
with the patch extraction, patient-grouped splitting and weighted metrics
around it."""
from .core.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
