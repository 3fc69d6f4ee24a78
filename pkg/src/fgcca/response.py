"""A multivariate response block joining the criterion.

The extended criterion adds ``2 sum_j g(<f_j, Sigma_jY a>)`` with a unit
Euclidean weight vector ``a``. ``Sigma_jY`` is stored as a ``G_j x p``
kernel; it acts on ``a`` by a plain matrix product and its adjoint acts on
functions through quadrature.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .covariance import ProcessModel
from .data import LongitudinalDataset
from .deflation import FgccaFit, fit_higher_order
from .errors import ParseError, SchemaError, ValidationError
from .grid import GridFunction, TimeGrid
from .smoothing import local_linear_1d
from .solver import FgccaConfig, Problem, SolverState, _table, build_metric, operator_table, run_bca

log = logging.getLogger(__name__)


@dataclass
class ResponseBlock:
    Y: np.ndarray  # (N, p), centered
    cross_cov: list[np.ndarray]  # per block (G_j, p)
    names: list[str] | None = None
    a: np.ndarray | None = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.float64)
        self.cross_cov = [np.asarray(K, dtype=np.float64) for K in self.cross_cov]
        for K in self.cross_cov:
            if K.ndim != 2 or K.shape[1] != self.p or not np.all(np.isfinite(K)):
                raise ValidationError("response kernels must be finite (G_j, p) arrays")
        if self.a is not None:
            a = np.asarray(self.a, dtype=np.float64)
            if abs(np.linalg.norm(a) - 1.0) > 1e-12:
                raise ValidationError("response weights must have unit norm")
            self.a = a

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    def normalized(self, model: ProcessModel) -> list[np.ndarray]:
        """Kernels rescaled by the process normalization weights."""
        return [model.norm_weights[j] * K for j, K in enumerate(self.cross_cov)]


def center_response(Y, standardize: bool = False) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    Yc = Y - Y.mean(axis=0)
    if standardize:
        sd = Yc.std(axis=0)
        sd[sd == 0] = 1.0
        Yc = Yc / sd
    return Yc


def estimate_response_cross_cov(
    dataset: LongitudinalDataset,
    Y: np.ndarray,
    j: int,
    grid: TimeGrid,
    bandwidth: float,
    mean: GridFunction,
) -> np.ndarray:
    """``E[X_j(t) Y_i]`` on ``grid`` for each response column (``G x p``).

    ``Y`` rows follow ``dataset.subjects`` and must already be centered.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != dataset.N:
        raise ValidationError("response rows must align with dataset subjects")
    idx, t, u = dataset.arrays(j)
    r = u - grid.interpolate(mean.values, t)
    out = np.zeros((grid.size, Y.shape[1]))
    for c in range(Y.shape[1]):
        col = Y[:, c]
        if np.all(col == col[0]):
            warnings.warn(f"response column {c} is constant; its cross-covariance is zero")
            continue
        out[:, c] = local_linear_1d(t, r * col[idx], grid.points, bandwidth)
    return out


def estimate_response_block(
    dataset: LongitudinalDataset,
    Y: np.ndarray,
    model: ProcessModel,
    standardize: bool = False,
    names=None,
) -> ResponseBlock:
    Yc = center_response(Y, standardize)
    kernels = [
        estimate_response_cross_cov(
            dataset, Yc, j + 1, model.grids[j], model.bandwidths["mean"][j], model.mean(j)
        )
        for j in range(model.J)
    ]
    return ResponseBlock(Yc, kernels, names)


def fit_with_response(covariances, response: ResponseBlock | list, config: FgccaConfig, init=None, a0=None) -> SolverState:
    """One BCA fit of the extended criterion; the response block is updated last.

    ``covariances`` is a ``J x J`` operator table or a ProcessModel (then
    kernels and response kernels are both normalized).
    """
    if isinstance(covariances, ProcessModel):
        resp = response.normalized(covariances) if isinstance(response, ResponseBlock) else response
        covariances = operator_table(covariances, normalized=True)
    else:
        resp = response.cross_cov if isinstance(response, ResponseBlock) else response
    grids, kernels = _table(covariances, config.J)
    resp = [np.asarray(K, dtype=np.float64) for K in resp]
    prob = Problem(grids, kernels, config.C, config.scheme, resp)
    metrics = [build_metric(j, config, covariances) for j in range(config.J)]
    return run_bca(prob, metrics, config, init, a0=a0)


def fit_higher_order_with_response(model: ProcessModel, response: ResponseBlock, config: FgccaConfig) -> FgccaFit:
    return fit_higher_order(model, config, response=response.normalized(model))


def load_response_csv(path, subjects) -> tuple[np.ndarray, list[str]]:
    """Read ``subject_id`` plus numeric columns, aligned to ``subjects``."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "subject_id" not in fields:
            raise SchemaError("response file needs a subject_id column")
        names = [c for c in fields if c != "subject_id"]
        if not names:
            raise SchemaError("response file has no response column")
        for line, row in enumerate(reader, start=2):
            try:
                rows[row["subject_id"].strip()] = [float(row[c]) for c in names]
            except (TypeError, ValueError):
                raise ParseError("non-numeric response value", line=line) from None
    missing = [s for s in subjects if s not in rows]
    if missing:
        raise ValidationError(f"no response for subject(s) {missing[:5]}")
    return np.array([rows[s] for s in subjects]), names
