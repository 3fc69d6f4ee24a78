"""Grid discretization of L2 functions and integral operators.

Every function lives on a :class:`TimeGrid` carrying trapezoid quadrature
weights. Operators are kernel matrices and are always applied through the
weights, ``(K f)_s = sum_t K[s, t] w_t f_t``, so continuous formulas carry
over verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy import linalg

from .errors import (
    ExtrapolationError,
    IllPosedMetricError,
    IncompatibleGridError,
    InvalidGridError,
    ValidationError,
)

DEFAULT_GRID_SIZE = 51


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def trapezoid_weights(points) -> np.ndarray:
    """Trapezoid quadrature weights for strictly increasing ``points``."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise InvalidGridError("a grid needs at least 2 points")
    d = np.diff(p)
    if not np.all(d > 0) or not np.all(np.isfinite(p)):
        raise InvalidGridError("grid points must be finite and strictly increasing")
    w = np.empty_like(p)
    w[0] = d[0] / 2
    w[-1] = d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    return w


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing evaluation points with positive quadrature weights."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points)
        w = _frozen(self.weights)
        if pts.ndim != 1 or pts.size < 2:
            raise InvalidGridError("a grid needs at least 2 points")
        if not np.all(np.diff(pts) > 0):
            raise InvalidGridError("grid points must be strictly increasing")
        if w.shape != pts.shape or not np.all(w > 0):
            raise InvalidGridError("weights must be positive and match the points")
        length = pts[-1] - pts[0]
        if abs(w.sum() - length) > 1e-12 * max(length, 1.0):
            raise InvalidGridError("weights must sum to the interval length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_points(cls, points) -> "TimeGrid":
        return cls(points, trapezoid_weights(points))

    @classmethod
    def uniform(cls, start: float, end: float, size: int = DEFAULT_GRID_SIZE) -> "TimeGrid":
        if not end > start:
            raise InvalidGridError(f"empty interval [{start}, {end}]")
        return cls.from_points(np.linspace(start, end, size))

    @property
    def size(self) -> int:
        return self.points.size

    @property
    def start(self) -> float:
        return float(self.points[0])

    @property
    def end(self) -> float:
        return float(self.points[-1])

    @property
    def length(self) -> float:
        return self.end - self.start

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return np.array_equal(self.points, other.points) and np.array_equal(
            self.weights, other.weights
        )

    def __hash__(self):
        return hash((self.points.tobytes(), self.weights.tobytes()))

    def interpolate(self, values, times, tol: float = 1e-9) -> np.ndarray:
        """Linearly interpolate grid ``values`` (last axis = grid) at ``times``.

        Times outside the grid range by more than ``tol`` raise
        :class:`ExtrapolationError`.
        """
        t = np.asarray(times, dtype=np.float64)
        if t.size and (t.min() < self.start - tol or t.max() > self.end + tol):
            raise ExtrapolationError(
                f"times outside [{self.start:g}, {self.end:g}] cannot be interpolated"
            )
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            return np.interp(t, self.points, v)
        return np.stack([np.interp(t, self.points, row) for row in v.reshape(-1, v.shape[-1])]).reshape(
            v.shape[:-1] + t.shape
        )

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeGrid":
        return cls(d["points"], d["weights"])


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (self.grid.size,):
            raise ValidationError(
                f"expected {self.grid.size} values, got shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError("function values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: TimeGrid, fn: Callable) -> "GridFunction":
        return cls(grid, fn(grid.points))

    def __call__(self, times) -> np.ndarray:
        return self.grid.interpolate(self.values, times)

    def __neg__(self):
        return GridFunction(self.grid, -self.values)

    def scaled(self, factor: float) -> "GridFunction":
        return GridFunction(self.grid, factor * self.values)

    def norm(self) -> float:
        return float(np.sqrt(inner_product(self, self)))


@dataclass(frozen=True, eq=False)
class GridOperator:
    """Integral operator from functions on ``col_grid`` to functions on ``row_grid``."""

    row_grid: TimeGrid
    col_grid: TimeGrid
    kernel: np.ndarray

    def __post_init__(self):
        k = _frozen(self.kernel)
        if k.shape != (self.row_grid.size, self.col_grid.size):
            raise ValidationError(
                f"kernel shape {k.shape} does not match grids "
                f"({self.row_grid.size}, {self.col_grid.size})"
            )
        if not np.all(np.isfinite(k)):
            raise ValidationError("kernel entries must be finite")
        object.__setattr__(self, "kernel", k)

    @property
    def T(self) -> "GridOperator":
        return GridOperator(self.col_grid, self.row_grid, self.kernel.T)

    def __call__(self, f: GridFunction) -> GridFunction:
        return apply_operator(self, f)

    def is_symmetric(self, atol: float = 1e-10) -> bool:
        return self.row_grid == self.col_grid and bool(
            np.allclose(self.kernel, self.kernel.T, rtol=0.0, atol=atol)
        )


def _check_same_grid(a: TimeGrid, b: TimeGrid) -> None:
    if a != b:
        raise IncompatibleGridError("functions live on different grids")


def inner_product(f: GridFunction, g: GridFunction) -> float:
    """Quadrature L2 inner product ``sum_k w_k f_k g_k``."""
    _check_same_grid(f.grid, g.grid)
    return float(np.dot(f.grid.weights * f.values, g.values))


def apply_operator(K: GridOperator, f: GridFunction) -> GridFunction:
    _check_same_grid(K.col_grid, f.grid)
    return GridFunction(K.row_grid, K.kernel @ (K.col_grid.weights * f.values))


class Metric:
    """The constraint metric ``v -> tau v + (1 - tau) K v`` on one grid.

    The operator is self-adjoint in the quadrature inner product, so it is
    factorized in the symmetric form ``tau I + (1 - tau) D K D`` with
    ``D = diag(sqrt(w))``.
    """

    def __init__(self, grid: TimeGrid, tau: float = 1.0, kernel=None, process: int | None = None):
        if not 0.0 < tau <= 1.0:
            raise ValidationError(f"tau must lie in (0, 1], got {tau}")
        self.grid = grid
        self.tau = float(tau)
        self.process = process
        self.kernel = None if kernel is None or tau == 1.0 else np.asarray(kernel, dtype=np.float64)
        self._sqrt_w = np.sqrt(grid.weights)
        self._chol = None
        if self.kernel is not None:
            sym = (self.kernel + self.kernel.T) / 2
            S = (1.0 - self.tau) * (self._sqrt_w[:, None] * sym * self._sqrt_w[None, :])
            S[np.diag_indices_from(S)] += self.tau
            self._chol = _cholesky(S, process)

    @property
    def is_identity(self) -> bool:
        return self.kernel is None

    def matrix(self) -> np.ndarray:
        """Dense matrix acting on grid values."""
        eye = np.eye(self.grid.size)
        if self.kernel is None:
            return eye
        return self.tau * eye + (1.0 - self.tau) * self.kernel * self.grid.weights[None, :]

    def apply_values(self, v: np.ndarray) -> np.ndarray:
        if self.kernel is None:
            return np.array(v, dtype=np.float64)
        return self.tau * v + (1.0 - self.tau) * (self.kernel @ (self.grid.weights * v))

    def solve_values(self, rhs: np.ndarray) -> np.ndarray:
        if self.kernel is None:
            return np.array(rhs, dtype=np.float64)
        y = linalg.cho_solve(self._chol, self._sqrt_w * rhs)
        return y / self._sqrt_w

    def __call__(self, f: GridFunction) -> GridFunction:
        _check_same_grid(self.grid, f.grid)
        return GridFunction(self.grid, self.apply_values(f.values))


def _cholesky(S: np.ndarray, process: int | None):
    try:
        c = linalg.cho_factor(S, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise IllPosedMetricError(
            "metric is not positive definite; use tau = 1 or a positive semidefinite covariance",
            process=process,
        ) from exc
    if np.min(np.abs(np.diag(c[0]))) < 1e-12 * max(1.0, np.max(np.abs(np.diag(c[0])))):
        raise IllPosedMetricError("metric is numerically singular", process=process)
    return c


MetricLike = Union[Metric, Callable[[GridFunction], GridFunction]]


def solve_metric(M_apply: MetricLike, rhs: GridFunction, process: int | None = None) -> GridFunction:
    """Solve ``M x = rhs`` for a metric that is SPD in the quadrature inner product.

    ``M_apply`` is either a :class:`Metric` or any callable mapping
    :class:`GridFunction` to :class:`GridFunction`; the latter is assembled
    column by column and factorized.
    """
    if isinstance(M_apply, Metric):
        _check_same_grid(M_apply.grid, rhs.grid)
        return GridFunction(rhs.grid, M_apply.solve_values(rhs.values))
    grid = rhs.grid
    G = grid.size
    A = np.empty((G, G))
    for k in range(G):
        e = np.zeros(G)
        e[k] = 1.0
        out = M_apply(GridFunction(grid, e))
        _check_same_grid(out.grid, grid)
        A[:, k] = out.values
    d = np.sqrt(grid.weights)
    S = d[:, None] * A / d[None, :]
    if not np.allclose(S, S.T, rtol=1e-8, atol=1e-10 * max(1.0, np.abs(S).max())):
        raise IllPosedMetricError("metric is not self-adjoint", process=process)
    c = _cholesky((S + S.T) / 2, process)
    y = linalg.cho_solve(c, d * rhs.values)
    return GridFunction(grid, y / d)


def metric_norm(M: Metric, v: np.ndarray) -> float:
    """``||M^{-1/2} v||`` computed as ``sqrt(<v, M^{-1} v>)``."""
    return float(np.sqrt(np.dot(M.grid.weights * v, M.solve_values(v))))
