"""Operator-level deflation and the multi-order fitting loop.

Deflation acts on kernels directly so the (possibly unobserved) processes
never have to be reconstructed. With ``P = I - f f^T W`` (orthogonal) or
``A = I - d Sigma_jj W f f^T W`` (uncorrelated), a deflated kernel is
``P_j K P_k^T`` or ``A_j K A_k^T`` respectively.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateComponentError, FgccaError, NormalizationError, ValidationError
from .grid import GridFunction, GridOperator, Metric, TimeGrid
from .solver import (
    FgccaConfig,
    Problem,
    SolverState,
    _table,
    build_metric,
    operator_table,
    run_bca,
)

log = logging.getLogger(__name__)

_UNIT_TOL = 1e-8


@dataclass
class DeflationStep:
    order: int
    mode: str
    functions: list[np.ndarray]
    d: list[float] | None = None


def _unit(f: GridFunction) -> np.ndarray:
    n2 = float(np.dot(f.grid.weights * f.values, f.values))
    if abs(n2 - 1.0) > _UNIT_TOL:
        raise NormalizationError(f"function must have unit L2 norm, got norm^2 = {n2:.6g}")
    return f.values


def orthogonal_projector(f: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Matrix of ``I - f <f, .>`` acting on grid values."""
    return np.eye(f.size) - np.outer(f, w * f)


def uncorrelated_projector(f: np.ndarray, K: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, float]:
    """Matrix of ``I - d Sigma_jj f <f, .>`` and ``d = <f, Sigma_jj f>^-1``."""
    Kf = K @ (w * f)
    q = float(np.dot(w * f, Kf))
    if not q > 0:
        raise DegenerateComponentError(f"<f, Sigma_jj f> = {q:.3g} is not positive")
    d = 1.0 / q
    return np.eye(f.size) - d * np.outer(Kf, w * f), d


def deflate_orthogonal(K: GridOperator, f_j: GridFunction, f_k: GridFunction) -> GridOperator:
    """``(I - Phi_j) Sigma_jk (I - Phi_k)`` for unit functions ``f_j``, ``f_k``."""
    if f_j.grid != K.row_grid or f_k.grid != K.col_grid:
        raise ValidationError("functions must live on the operator grids")
    Pj = orthogonal_projector(_unit(f_j), K.row_grid.weights)
    Pk = orthogonal_projector(_unit(f_k), K.col_grid.weights)
    return GridOperator(K.row_grid, K.col_grid, Pj @ K.kernel @ Pk.T)


def deflate_uncorrelated(
    K: GridOperator, K_jj: GridOperator, K_kk: GridOperator, f_j: GridFunction, f_k: GridFunction
) -> GridOperator:
    """``(I - d_j Sigma_jj Phi_j) Sigma_jk (I - d_k Phi_k Sigma_kk)``."""
    Aj, _ = uncorrelated_projector(f_j.values, K_jj.kernel, K.row_grid.weights)
    Ak, _ = uncorrelated_projector(f_k.values, K_kk.kernel, K.col_grid.weights)
    return GridOperator(K.row_grid, K.col_grid, Aj @ K.kernel @ Ak.T)


@dataclass
class FgccaFit:
    """Canonical functions for orders 1..M with per-order solver records.

    ``functions[m][j]`` holds the L2-normalized canonical function of block
    ``j`` at order ``m + 1``; ``states[m]`` keeps the metric-normalized
    solver output and its criterion trace.
    """

    grids: list[TimeGrid]
    functions: list[list[np.ndarray]]
    states: list[SolverState]
    mode: str
    config: FgccaConfig
    steps: list[DeflationStep] = field(default_factory=list)
    response_weights: list[np.ndarray] | None = None

    @property
    def M(self) -> int:
        return len(self.functions)

    @property
    def J(self) -> int:
        return len(self.grids)

    def function(self, j: int, m: int) -> GridFunction:
        """Canonical function of block ``j`` (0-based) at order ``m`` (1-based)."""
        return GridFunction(self.grids[j], self.functions[m - 1][j])

    def basis(self, j: int, n: int | None = None) -> np.ndarray:
        """``(n, G_j)`` array of the first ``n`` canonical functions of block ``j``."""
        n = self.M if n is None else n
        return np.array([self.functions[m][j] for m in range(n)])

    def gram(self, j: int) -> np.ndarray:
        B = self.basis(j)
        return (B * self.grids[j].weights) @ B.T

    def to_dict(self) -> dict:
        return {
            "format": "fgcca-fit",
            "version": 1,
            "mode": self.mode,
            "config": self.config.to_dict(),
            "grids": [g.to_dict() for g in self.grids],
            "functions": [[f.tolist() for f in order] for order in self.functions],
            "orders": [
                {
                    "criterion_trace": st.criterion_trace,
                    "iterations": st.iterations,
                    "converged": st.converged,
                    "stationary": st.stationary,
                    "d": None if step.d is None else step.d,
                }
                for st, step in zip(self.states, self.steps)
            ],
            "response_weights": None
            if self.response_weights is None
            else [a.tolist() for a in self.response_weights],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FgccaFit":
        if d.get("format") != "fgcca-fit":
            raise ValidationError("not a fit bundle")
        grids = [TimeGrid.from_dict(g) for g in d["grids"]]
        functions = [[np.asarray(f) for f in order] for order in d["functions"]]
        states = [
            SolverState(
                functions=[GridFunction(grids[j], f) for j, f in enumerate(order)],
                criterion_trace=rec["criterion_trace"],
                iterations=rec["iterations"],
                converged=rec["converged"],
                stationary=rec.get("stationary", []),
            )
            for order, rec in zip(functions, d["orders"])
        ]
        steps = [
            DeflationStep(m + 1, d["mode"], functions[m], rec.get("d"))
            for m, rec in enumerate(d["orders"])
        ]
        ra = d.get("response_weights")
        return cls(
            grids=grids,
            functions=functions,
            states=states,
            mode=d["mode"],
            config=FgccaConfig.from_dict(d["config"]),
            steps=steps,
            response_weights=None if ra is None else [np.asarray(a) for a in ra],
        )


def _deflate_all(kernels, resp, grids, F, mode):
    """Deflate every stored kernel (and response kernel) with the order's functions."""
    J = len(grids)
    w = [g.weights for g in grids]
    d = None
    if mode == "orthogonal":
        units = [f / np.sqrt(np.dot(w[j] * f, f)) for j, f in enumerate(F)]
        proj = [orthogonal_projector(units[j], w[j]) for j in range(J)]
    else:
        pairs = [uncorrelated_projector(F[j], kernels[j][j], w[j]) for j in range(J)]
        proj = [p for p, _ in pairs]
        d = [dj for _, dj in pairs]
    out = [[None] * J for _ in range(J)]
    for j in range(J):
        for k in range(j, J):
            if kernels[j][k] is None:
                continue
            Kd = proj[j] @ kernels[j][k] @ proj[k].T
            if j == k:
                Kd = (Kd + Kd.T) / 2
            out[j][k] = Kd
            out[k][j] = Kd.T
    new_resp = None if resp is None else [proj[j] @ resp[j] for j in range(J)]
    return out, new_resp, d


def fit_higher_order(model_or_table, config: FgccaConfig, response=None, init=None) -> FgccaFit:
    """Fit orders 1..M, deflating every operator between orders.

    ``model_or_table`` is a :class:`~fgcca.covariance.ProcessModel` (its
    normalized kernels are used) or a ``J x J`` table of :class:`GridOperator`.
    ``response`` optionally supplies one ``G_j x p`` kernel per block.
    """
    table = model_or_table
    if not isinstance(model_or_table, list):
        table = operator_table(model_or_table, normalized=True)
    J = config.J
    grids, kernels = _table(table, J)
    if config.deflation == "uncorrelated":
        missing = [j for j in range(J) if kernels[j][j] is None]
        if missing:
            raise ValidationError(f"uncorrelated deflation needs self-covariances for {missing}")
    resp = None if response is None else [np.asarray(r, dtype=np.float64) for r in response]
    rng = np.random.default_rng(config.seed) if config.init == "random" else None

    functions, states, steps, resp_weights = [], [], [], []
    for m in range(1, config.n_components + 1):
        try:
            ops = [
                [None if kernels[j][k] is None else GridOperator(grids[j], grids[k], kernels[j][k])
                 for k in range(J)]
                for j in range(J)
            ]
            metrics = [build_metric(j, config, ops) for j in range(J)]
            prob = Problem(grids, kernels, config.C, config.scheme, resp)
            state = run_bca(prob, metrics, config, init if m == 1 else None, rng=rng)
            F = state.values()
            F_unit = [f / np.sqrt(np.dot(grids[j].weights * f, f)) for j, f in enumerate(F)]
            kernels, resp, d = _deflate_all(kernels, resp, grids, F_unit, config.deflation)
        except FgccaError as exc:
            exc.order = m
            exc.args = (f"order {m}: {exc}",)
            raise
        functions.append(F_unit)
        states.append(state)
        steps.append(DeflationStep(m, config.deflation, F_unit, d))
        if state.response_weights is not None:
            resp_weights.append(state.response_weights)
    return FgccaFit(
        grids=grids,
        functions=functions,
        states=states,
        mode=config.deflation,
        config=config,
        steps=steps,
        response_weights=resp_weights or None,
    )
