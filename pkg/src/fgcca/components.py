"""Subject-level components: conditional-expectation scores and reconstruction.

Scores are stacked process-major: ``xi[j * M + m]`` is order ``m + 1`` of
block ``j``. All scores live on the original (un-normalized) process scale;
normalization weights only enter the criterion that produced the basis.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .covariance import ProcessModel
from .data import LongitudinalDataset, SparseSample
from .deflation import FgccaFit
from .errors import NumericalError, ReconstructionBasisError, SparseDataError, ValidationError
from .grid import GridFunction, TimeGrid

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-10


@dataclass
class ScoreModel:
    grids: list[TimeGrid]
    basis: list[np.ndarray]  # per block, (M, G_j)
    score_cov: np.ndarray
    noise_vars: np.ndarray
    means: list[np.ndarray]
    mode: str = "orthogonal"
    clamped: bool = False

    def __post_init__(self):
        S = np.asarray(self.score_cov, dtype=np.float64)
        n = self.J * self.M
        if S.shape != (n, n):
            raise ValidationError(f"score covariance must be {n}x{n}")
        if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
            raise ValidationError("score covariance must be symmetric")
        self.score_cov = (S + S.T) / 2
        self.noise_vars = np.asarray(self.noise_vars, dtype=np.float64)

    @property
    def J(self) -> int:
        return len(self.grids)

    @property
    def M(self) -> int:
        return self.basis[0].shape[0]

    @classmethod
    def from_fit(cls, model: ProcessModel, fit: FgccaFit, n_components: int | None = None) -> "ScoreModel":
        n = fit.M if n_components is None else int(n_components)
        if not 1 <= n <= fit.M:
            raise ValidationError(f"n_components must lie in 1..{fit.M}")
        S, clamped = estimate_score_cov(model, fit, n)
        return cls(
            grids=list(model.grids),
            basis=[fit.basis(j, n) for j in range(model.J)],
            score_cov=S,
            noise_vars=model.noise_vars,
            means=[np.asarray(m) for m in model.means],
            mode=fit.mode,
            clamped=clamped,
        )


def psd_clamp(S: np.ndarray) -> tuple[np.ndarray, bool]:
    """Floor eigenvalues at 0; report whether anything was changed."""
    S = (S + S.T) / 2
    vals, vecs = np.linalg.eigh(S)
    if vals.min() >= 0:
        return S, False
    tol = 1e-12 * max(1.0, abs(vals).max())
    clamped = bool(vals.min() < -tol)
    S2 = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    return (S2 + S2.T) / 2, clamped


def estimate_score_cov(model: ProcessModel, fit: FgccaFit, n_components: int | None = None):
    """``E[xi xi^T]`` from quadratic forms ``<f_j^m, Sigma_jk f_k^m'>`` of the surfaces.

    Blocks whose cross-covariance was not estimated are set to zero.
    Returns ``(matrix, clamped)``.
    """
    n = fit.M if n_components is None else n_components
    J = model.J
    S = np.zeros((J * n, J * n))
    for j in range(J):
        Bj = fit.basis(j, n) * model.grids[j].weights
        for k in range(j, J):
            if not model.has(j, k):
                continue
            Bk = fit.basis(k, n) * model.grids[k].weights
            block = Bj @ model.kernel(j, k) @ Bk.T
            S[j * n:(j + 1) * n, k * n:(k + 1) * n] = block
            S[k * n:(k + 1) * n, j * n:(j + 1) * n] = block.T
    S, clamped = psd_clamp(S)
    if clamped:
        log.warning("score covariance was indefinite; negative eigenvalues floored at 0")
    return S, clamped


def _design(samples: Sequence[SparseSample | None], sm: ScoreModel):
    """Stacked residuals, block-diagonal design and noise vector for one subject."""
    rows, resid, noise, cols = [], [], [], []
    M = sm.M
    for j in range(sm.J):
        s = samples[j] if j < len(samples) else None
        if s is None or s.n == 0:
            continue
        g = sm.grids[j]
        Fij = g.interpolate(sm.basis[j], s.times).T  # (n_ij, M)
        mu = g.interpolate(sm.means[j], s.times)
        rows.append(Fij)
        cols.append(j)
        resid.append(s.values - mu)
        noise.append(np.full(s.n, max(float(sm.noise_vars[j]), NOISE_FLOOR)))
    if not rows:
        return None, None, None
    n_tot = sum(r.shape[0] for r in rows)
    F = np.zeros((n_tot, sm.J * M))
    r0 = 0
    for Fij, j in zip(rows, cols):
        F[r0:r0 + Fij.shape[0], j * M:(j + 1) * M] = Fij
        r0 += Fij.shape[0]
    return F, np.concatenate(resid), np.concatenate(noise)


def blup_scores(samples: Sequence[SparseSample | None], score_model: ScoreModel) -> np.ndarray:
    """``Sigma F^T (F Sigma F^T + sigma)^-1 (U - mu)`` for one subject.

    ``samples[j]`` holds the subject's observations of block ``j`` (or
    ``None``). With no observation at all the prior mean 0 is returned.
    """
    S = score_model.score_cov
    F, r, noise = _design(samples, score_model)
    if F is None:
        return np.zeros(S.shape[0])
    SF = S @ F.T
    V = F @ SF
    V[np.diag_indices_from(V)] += noise
    try:
        c = linalg.cho_factor(V, lower=True)
        z = linalg.cho_solve(c, r)
    except linalg.LinAlgError as exc:
        raise NumericalError(
            "observation covariance is singular; use a positive noise variance or jitter duplicate times"
        ) from exc
    return SF @ z


def quadrature_scores(
    samples: Sequence[SparseSample | None],
    score_model: ScoreModel,
    max_gap_fraction: float = 0.2,
) -> np.ndarray:
    """Scores as quadrature inner products of interpolated centered data with the basis."""
    M = score_model.M
    out = np.zeros(score_model.J * M)
    for j in range(score_model.J):
        s = samples[j] if j < len(samples) else None
        g = score_model.grids[j]
        if s is None or s.n == 0:
            raise SparseDataError(f"block {j} has no observation; use blup_scores")
        edges = np.concatenate([[g.start], s.times, [g.end]])
        gap = float(np.max(np.diff(edges)))
        if gap > max_gap_fraction * g.length:
            raise SparseDataError(
                f"block {j}: observation gap {gap:.3g} exceeds {max_gap_fraction:.0%} of the interval; "
                "use blup_scores"
            )
        U = np.interp(g.points, s.times, s.values)
        centered = U - score_model.means[j]
        out[j * M:(j + 1) * M] = score_model.basis[j] @ (g.weights * centered)
    return out


@dataclass
class ComponentSet:
    """Scores ``xi`` and components ``y`` with shape ``(N, J, M)``."""

    subjects: list[str]
    xi: np.ndarray
    y: np.ndarray
    mode: str

    def to_rows(self):
        N, J, M = self.xi.shape
        for i in range(N):
            for j in range(J):
                for m in range(M):
                    yield self.subjects[i], j + 1, m + 1, float(self.xi[i, j, m]), float(self.y[i, j, m])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("subject_id", "process_id", "order", "xi", "y"))
            for sid, j, m, xi, y in self.to_rows():
                w.writerow((sid, j, m, repr(xi), repr(y)))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "subjects": list(self.subjects),
            "xi": self.xi.tolist(),
            "y": self.y.tolist(),
        }


def decorrelate(xi: np.ndarray, mode: str, subjects=None) -> ComponentSet:
    """Turn basis coefficients ``(N, J, M)`` into components.

    Orthogonal mode keeps ``y = xi``. Uncorrelated mode residualizes each
    order against the previous components of the same block by least
    squares with an intercept, so within-block components are exactly
    uncorrelated across subjects.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if xi.ndim != 3:
        raise ValidationError("scores must have shape (N, J, M)")
    subjects = list(subjects) if subjects is not None else [str(i + 1) for i in range(xi.shape[0])]
    if mode == "orthogonal":
        return ComponentSet(subjects, xi, xi.copy(), mode)
    if mode != "uncorrelated":
        raise ValidationError(f"unknown mode {mode!r}")
    N, J, M = xi.shape
    y = np.empty_like(xi)
    for j in range(J):
        basis = []  # centered previous components
        for m in range(M):
            v = xi[:, j, m].copy()
            for yc in basis:
                v -= (np.dot(yc, v - v.mean()) / np.dot(yc, yc)) * yc
            y[:, j, m] = v
            yc = v - v.mean()
            if np.dot(yc, yc) <= 1e-300:
                warnings.warn(f"component {m + 1} of block {j + 1} is degenerate; skipped as projector")
            else:
                basis.append(yc)
    return ComponentSet(subjects, xi, y, mode)


def subject_samples(dataset: LongitudinalDataset, subject_id: str) -> list[SparseSample]:
    return [dataset.sample(subject_id, j) for j in range(1, dataset.J + 1)]


def estimate_components(
    dataset: LongitudinalDataset,
    score_model: ScoreModel,
    method: str = "blup",
    max_gap_fraction: float = 0.2,
) -> ComponentSet:
    J, M = score_model.J, score_model.M
    xi = np.zeros((dataset.N, J, M))
    for i, sid in enumerate(dataset.subjects):
        samples = subject_samples(dataset, sid)
        if method == "blup":
            v = blup_scores(samples, score_model)
        elif method == "quadrature":
            v = quadrature_scores(samples, score_model, max_gap_fraction)
        else:
            raise ValidationError(f"unknown scoring method {method!r}")
        xi[i] = v.reshape(J, M)
    return decorrelate(xi, score_model.mode, dataset.subjects)


def reconstruct(
    scores: np.ndarray,
    score_model: ScoreModel,
    grids: Sequence[TimeGrid] | None = None,
    kind: str = "xi",
) -> list[GridFunction]:
    """``mu_j + sum_m xi_j^m f_j^m`` for every block of one subject.

    ``scores`` is ``(J, M)`` or flat. Components ``y`` are only a valid
    basis expansion in orthogonal mode.
    """
    if kind not in ("xi", "y"):
        raise ValidationError("kind must be 'xi' or 'y'")
    if kind == "y" and score_model.mode != "orthogonal":
        raise ReconstructionBasisError(
            "uncorrelated components are not basis coefficients; reconstruct from xi"
        )
    J, M = score_model.J, score_model.M
    sc = np.asarray(scores, dtype=np.float64).reshape(J, -1)
    if sc.shape[1] < M:
        raise ValidationError("need scores for every order of the basis")
    out = []
    for j in range(J):
        g = score_model.grids[j]
        vals = score_model.means[j] + sc[j, :M] @ score_model.basis[j]
        if grids is not None and grids[j] != g:
            vals = g.interpolate(vals, grids[j].points)
            out.append(GridFunction(grids[j], vals))
        else:
            out.append(GridFunction(g, vals))
    return out


def predict_points(
    samples: Sequence[SparseSample | None],
    score_model: ScoreModel,
    target_times: Sequence,
) -> list[np.ndarray]:
    """Predict each block at ``target_times[j]`` from partial observations."""
    xi = blup_scores(samples, score_model)
    traj = reconstruct(xi, score_model)
    return [
        traj[j].grid.interpolate(traj[j].values, np.asarray(target_times[j], dtype=np.float64))
        for j in range(score_model.J)
    ]
