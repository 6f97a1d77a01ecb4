"""Two-stage multiple change-point detection for functional data sequences."""

from .core import ChangePointSet, DetectorConfig, FunctionalSequence, Grid, difference, validate_csv_matrix
from .pipeline import Detection, detect

__all__ = [
    "ChangePointSet",
    "Detection",
    "DetectorConfig",
    "FunctionalSequence",
    "Grid",
    "detect",
    "difference",
    "validate_csv_matrix",
]
__version__ = "0.1.0"
