"""Hierarchical Bayesian dose-response meta-analysis for multiple continuous treatments."""

__version__ = "0.1.0"

from .basis import BasisSet, build_basis, eval_matrix, eval_row
from .model import Dataset, DoseResponseModel, ParameterState, SubjectRecord
from .sampler import PosteriorDraws, SamplerConfig, sample

__all__ = [
    "BasisSet",
    "build_basis",
    "eval_matrix",
    "eval_row",
    "Dataset",
    "SubjectRecord",
    "ParameterState",
    "DoseResponseModel",
    "SamplerConfig",
    "PosteriorDraws",
    "sample",
    "__version__",
]
