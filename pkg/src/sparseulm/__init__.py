"""Sparse spatio-temporal networks and a desk-scale localization microscopy pipeline."""

__version__ = "0.1.0"

from .estimators import (  # noqa: E402
    CnnMaskSparsifier,
    ConventionalULM,
    SparseDeepULM,
    ThresholdSparsifier,
    TopKSparsifier,
)
from .sim import Movie, SimConfig, simulate  # noqa: E402
from .tensor import SparseTensor  # noqa: E402

__all__ = [
    "CnnMaskSparsifier",
    "ConventionalULM",
    "Movie",
    "SimConfig",
    "SparseDeepULM",
    "SparseTensor",
    "ThresholdSparsifier",
    "TopKSparsifier",
    "__version__",
    "simulate",
]
