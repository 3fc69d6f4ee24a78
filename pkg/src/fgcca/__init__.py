"""Functional generalized canonical correlation analysis for sparse longitudinal data."""

__version__ = "0.1.0"

from .components import ComponentSet, ScoreModel, blup_scores, estimate_components, reconstruct
from .covariance import ProcessModel, estimate_model
from .data import LongitudinalDataset, SparseSample, load_csv
from .deflation import FgccaFit, fit_higher_order
from .errors import FgccaError, NumericalError, ValidationError
from .grid import GridFunction, GridOperator, Metric, TimeGrid
from .smoothing import BACKEND
from .solver import FgccaConfig, fit_single

__all__ = [
    "BACKEND",
    "ComponentSet",
    "FgccaConfig",
    "FgccaError",
    "FgccaFit",
    "GridFunction",
    "GridOperator",
    "LongitudinalDataset",
    "Metric",
    "NumericalError",
    "ProcessModel",
    "ScoreModel",
    "SparseSample",
    "TimeGrid",
    "ValidationError",
    "blup_scores",
    "estimate_components",
    "estimate_model",
    "fit_higher_order",
    "fit_single",
    "load_csv",
    "reconstruct",
]
