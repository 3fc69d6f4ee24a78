"""Block-coordinate ascent for the multi-process covariance criterion.

The criterion is

    Psi(f) = sum_{j != k} c_jk g(<f_j, Sigma_jk f_k>)

maximized over ``<f_j, M_j f_j> = 1`` with ``M_j = tau_j I + (1 - tau_j) Sigma_jj``.
Each block update maximizes the linear minorizer of Psi, which makes the
sequence of criterion values non-decreasing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericalError, StationaryPointError, ValidationError
from .grid import GridFunction, GridOperator, Metric, TimeGrid

log = logging.getLogger(__name__)

SCHEMES = ("identity", "square", "abs")
DEFLATIONS = ("orthogonal", "uncorrelated")


def g_value(scheme: str, x):
    if scheme == "identity":
        return x
    if scheme == "square":
        return x * x
    if scheme == "abs":
        return np.abs(x)
    raise ConfigError(f"unknown scheme {scheme!r}")


def g_deriv(scheme: str, x):
    """Derivative of the scheme function; ``abs`` uses subgradient 0 at the origin."""
    if scheme == "identity":
        return np.ones_like(x) if isinstance(x, np.ndarray) else 1.0
    if scheme == "square":
        return 2.0 * x
    if scheme == "abs":
        return np.sign(x)
    raise ConfigError(f"unknown scheme {scheme!r}")


@dataclass
class FgccaConfig:
    C: np.ndarray
    tau: float | Sequence[float] = 1.0
    scheme: str = "identity"
    epsilon: float = 1e-8
    max_iters: int = 1000
    n_components: int = 1
    deflation: str = "orthogonal"
    init: str = "deterministic-svd"
    seed: int | None = None
    sign_convention: bool = True

    def __post_init__(self):
        C = np.array(self.C, dtype=np.float64)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ConfigError("design matrix C must be square")
        if not np.allclose(C, C.T, rtol=0, atol=0):
            raise ConfigError("design matrix C must be symmetric")
        if np.any(np.diag(C) != 0):
            raise ConfigError("design matrix C must have a zero diagonal")
        if np.any(C < 0) or not np.all(np.isfinite(C)):
            raise ConfigError("design matrix C must have nonnegative finite entries")
        self.C = C
        tau = np.broadcast_to(np.asarray(self.tau, dtype=np.float64), (C.shape[0],)).copy()
        if np.any(~(tau > 0)) or np.any(tau > 1):
            raise ConfigError("τ must lie in (0,1]")
        self.tau = tau
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if int(self.max_iters) < 1:
            raise ConfigError("max_iters must be at least 1")
        if int(self.n_components) < 1:
            raise ConfigError("n_components must be at least 1")
        if self.deflation not in DEFLATIONS:
            raise ConfigError(f"deflation must be one of {DEFLATIONS}")
        if self.init not in ("deterministic-svd", "random"):
            raise ConfigError("init must be 'deterministic-svd' or 'random'")
        self.max_iters = int(self.max_iters)
        self.n_components = int(self.n_components)

    @property
    def J(self) -> int:
        return self.C.shape[0]

    @classmethod
    def full(cls, J: int, **kwargs) -> "FgccaConfig":
        """Fully connected design ``c_jk = 1`` for ``j != k``."""
        return cls(C=np.ones((J, J)) - np.eye(J), **kwargs)

    def to_dict(self) -> dict:
        return {
            "C": self.C.tolist(),
            "tau": self.tau.tolist(),
            "scheme": self.scheme,
            "epsilon": self.epsilon,
            "max_iters": self.max_iters,
            "n_components": self.n_components,
            "deflation": self.deflation,
            "init": self.init,
            "seed": self.seed,
            "sign_convention": self.sign_convention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FgccaConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown solver option(s): {sorted(unknown)}")
        if "C" not in known:
            raise ConfigError("solver config needs a design matrix C")
        return cls(**known)


@dataclass
class SolverState:
    functions: list[GridFunction]
    criterion_trace: list[float]
    iterations: int
    converged: bool
    stationary: list[bool] = field(default_factory=list)
    response_weights: np.ndarray | None = None

    def values(self) -> list[np.ndarray]:
        return [f.values for f in self.functions]


class Problem:
    """Array-level view of the criterion: kernels, weights, design and scheme.

    ``kernels[j][k]`` is a ``G_j x G_k`` array or ``None``. An optional
    response block adds ``resp[j]`` (``G_j x p``) kernels.
    """

    def __init__(self, grids: list[TimeGrid], kernels, C, scheme: str, resp=None):
        self.grids = grids
        self.w = [g.weights for g in grids]
        self.J = len(grids)
        self.kernels = kernels
        self.C = np.asarray(C, dtype=np.float64)
        self.scheme = scheme
        self.resp = resp
        self.links = [
            [k for k in range(self.J) if k != j and self.C[j, k] > 0] for j in range(self.J)
        ]
        for j in range(self.J):
            for k in self.links[j]:
                if kernels[j][k] is None:
                    raise ValidationError(
                        f"c[{j},{k}] > 0 but the covariance between blocks {j} and {k} is missing"
                    )

    def pair(self, F, j, k) -> float:
        return float(np.dot(self.w[j] * F[j], self.kernels[j][k] @ (self.w[k] * F[k])))

    def resp_value(self, F, a, j) -> float:
        return float(np.dot(self.w[j] * F[j], self.resp[j] @ a))

    def criterion(self, F, a=None) -> float:
        total = 0.0
        for j in range(self.J):
            for k in self.links[j]:
                total += self.C[j, k] * g_value(self.scheme, self.pair(F, j, k))
        if self.resp is not None and a is not None:
            for j in range(self.J):
                total += 2.0 * g_value(self.scheme, self.resp_value(F, a, j))
        return float(total)

    def gradient(self, F, j, a=None) -> np.ndarray:
        grad = np.zeros(self.grids[j].size)
        for k in self.links[j]:
            Kf = self.kernels[j][k] @ (self.w[k] * F[k])
            x = float(np.dot(self.w[j] * F[j], Kf))
            grad += 2.0 * self.C[j, k] * g_deriv(self.scheme, x) * Kf
        if self.resp is not None and a is not None:
            Ka = self.resp[j] @ a
            x = float(np.dot(self.w[j] * F[j], Ka))
            grad += 2.0 * g_deriv(self.scheme, x) * Ka
        return grad

    def response_gradient(self, F, a) -> np.ndarray:
        grad = np.zeros_like(a)
        for j in range(self.J):
            KtWf = self.resp[j].T @ (self.w[j] * F[j])
            x = float(np.dot(KtWf, a))
            grad += 2.0 * g_deriv(self.scheme, x) * KtWf
        return grad


def _table(covariances, J):
    """Normalize a covariance table to ``(grids, kernels)``."""
    grids: list[TimeGrid | None] = [None] * J
    kernels = [[None] * J for _ in range(J)]
    for j in range(J):
        for k in range(J):
            op = covariances[j][k]
            if op is None:
                continue
            if not isinstance(op, GridOperator):
                raise ValidationError("covariance table entries must be GridOperator or None")
            kernels[j][k] = op.kernel
            for idx, g in ((j, op.row_grid), (k, op.col_grid)):
                if grids[idx] is None:
                    grids[idx] = g
                elif grids[idx] != g:
                    raise ValidationError(f"inconsistent grids for block {idx}")
    if any(g is None for g in grids):
        raise ValidationError("every block needs at least its self-covariance")
    return grids, kernels


def criterion(functions, covariances, C, scheme="identity") -> float:
    J = len(functions)
    grids, kernels = _table(covariances, J)
    return Problem(grids, kernels, C, scheme).criterion([f.values for f in functions])


def gradient_j(j, functions, covariances, C, scheme="identity") -> GridFunction:
    J = len(functions)
    grids, kernels = _table(covariances, J)
    prob = Problem(grids, kernels, C, scheme)
    return GridFunction(grids[j], prob.gradient([f.values for f in functions], j))


def build_metric(j: int, config: FgccaConfig, covariances) -> Metric:
    """``M_j = tau_j I + (1 - tau_j) Sigma_jj`` (identity when ``tau_j = 1``)."""
    op = covariances[j][j]
    tau = float(config.tau[j])
    if tau == 1.0:
        return Metric(op.row_grid, 1.0, process=j)
    return Metric(op.row_grid, tau, op.kernel, process=j)


def update_j(gradient: GridFunction, metric: Metric) -> GridFunction:
    """Maximizer of ``<gradient, x>`` over ``<x, M x> = 1``."""
    x, _ = _update(gradient.values, metric)
    if x is None:
        raise StationaryPointError("zero gradient: the block is at a stationary point")
    return GridFunction(gradient.grid, x)


def _update(grad: np.ndarray, metric: Metric):
    if not np.any(grad):
        return None, 0.0
    x = metric.solve_values(grad)
    nrm2 = float(np.dot(metric.grid.weights * grad, x))
    if not nrm2 > 0:
        return None, 0.0
    if not np.isfinite(nrm2):
        raise NumericalError("non-finite gradient norm")
    return x / np.sqrt(nrm2), np.sqrt(nrm2)


def m_normalize(v: np.ndarray, metric: Metric) -> np.ndarray:
    q = float(np.dot(metric.grid.weights * v, metric.apply_values(v)))
    if not q > 0:
        raise NumericalError("cannot normalize a function with nonpositive metric norm")
    return v / np.sqrt(q)


def _sign_of_peak(v: np.ndarray) -> float:
    return 1.0 if v[np.argmax(np.abs(v))] >= 0 else -1.0


def initial_functions(prob: Problem, metrics, config: FgccaConfig, rng=None):
    """Starting point: leading left singular functions, or Gaussian noise."""
    F = []
    if config.init == "random":
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        for j in range(prob.J):
            F.append(m_normalize(rng.standard_normal(prob.grids[j].size), metrics[j]))
        return F
    for j in range(prob.J):
        d = np.sqrt(prob.w[j])
        blocks = [
            d[:, None] * prob.kernels[j][k] * np.sqrt(prob.w[k])[None, :] for k in prob.links[j]
        ]
        if not blocks and prob.resp is not None:
            blocks = [d[:, None] * prob.resp[j]]
        u = None
        if blocks:
            A = np.hstack(blocks)
            if np.any(A):
                u = np.linalg.svd(A, full_matrices=False)[0][:, 0] / d
        if u is None:
            u = np.ones(prob.grids[j].size)
        u = u * _sign_of_peak(u)
        F.append(m_normalize(u, metrics[j]))
    return F


def _as_values(init, prob):
    out = []
    for j, f in enumerate(init):
        v = f.values if isinstance(f, GridFunction) else np.asarray(f, dtype=np.float64)
        if v.shape != (prob.grids[j].size,):
            raise ValidationError(f"initial function {j} has the wrong length")
        out.append(np.array(v))
    return out


def run_bca(prob: Problem, metrics, config: FgccaConfig, init=None, a0=None, rng=None) -> SolverState:
    """Gauss-Seidel sweeps j = 1..J (then the response block) until Psi stalls."""
    if rng is None and config.init == "random":
        rng = np.random.default_rng(config.seed)
    if init is None:
        F = initial_functions(prob, metrics, config, rng)
    else:
        F = [m_normalize(v, metrics[j]) for j, v in enumerate(_as_values(init, prob))]
    a = None
    if prob.resp is not None:
        a = _initial_response(prob, F, config, a0, rng)
    psi = prob.criterion(F, a)
    if not np.isfinite(psi):
        raise NumericalError("criterion is not finite at the starting point")
    trace = [psi]
    stationary = [False] * prob.J
    converged = False
    sweeps = 0
    for sweeps in range(1, config.max_iters + 1):
        for j in range(prob.J):
            x, _ = _update(prob.gradient(F, j, a), metrics[j])
            if x is None:
                stationary[j] = True
                continue
            stationary[j] = False
            F[j] = x
        if a is not None:
            ga = prob.response_gradient(F, a)
            n = np.linalg.norm(ga)
            if n > 0:
                a = ga / n
        new = prob.criterion(F, a)
        if not np.isfinite(new):
            raise NumericalError(f"criterion became non-finite at sweep {sweeps}")
        trace.append(new)
        if new - psi < config.epsilon:
            converged = True
            break
        psi = new
    if not converged:
        log.warning("no convergence after %d sweeps", config.max_iters)
    if config.sign_convention:
        F, a = _apply_sign_convention(F, a, config.scheme)
    return SolverState(
        functions=[GridFunction(prob.grids[j], F[j]) for j in range(prob.J)],
        criterion_trace=trace,
        iterations=sweeps,
        converged=converged,
        stationary=stationary,
        response_weights=a,
    )


def _initial_response(prob, F, config, a0, rng):
    p = prob.resp[0].shape[1]
    if a0 is not None:
        a = np.asarray(a0, dtype=np.float64)
    elif config.init == "random":
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        a = rng.standard_normal(p)
    else:
        a = sum(prob.resp[j].T @ (prob.w[j] * F[j]) for j in range(prob.J))
        if not np.any(a):
            a = np.eye(p)[0]
    n = np.linalg.norm(a)
    if not n > 0:
        raise ValidationError("initial response weights must be nonzero")
    return a / n


def _apply_sign_convention(F, a, scheme):
    # The identity scheme is only invariant to a joint flip of every block.
    if scheme == "identity":
        s = _sign_of_peak(F[0])
        return [s * f for f in F], (None if a is None else s * a)
    return [_sign_of_peak(f) * f for f in F], a


def fit_single(covariances, config: FgccaConfig, init=None) -> SolverState:
    """One canonical function per block from a ``J x J`` table of operators."""
    J = config.J
    grids, kernels = _table(covariances, J)
    prob = Problem(grids, kernels, config.C, config.scheme)
    metrics = [build_metric(j, config, covariances) for j in range(J)]
    return run_bca(prob, metrics, config, init)


def operator_table(model, normalized: bool = True):
    """``J x J`` table of :class:`GridOperator` from a ProcessModel."""
    return [
        [model.operator(j, k, normalized) if model.has(j, k) else None for k in range(model.J)]
        for j in range(model.J)
    ]
