"""Mean, (cross-)covariance surface, noise and normalization estimates.

Dataset-facing functions take 1-based process ids; :class:`ProcessModel`
indexes its per-process lists from 0.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import LongitudinalDataset
from .errors import DegenerateProcessError, InsufficientDataError, NoOverlapError, ValidationError
from .grid import DEFAULT_GRID_SIZE, GridFunction, GridOperator, TimeGrid
from .smoothing import cv_bandwidth_1d, gcv_bandwidth_1d, local_linear_1d, local_linear_2d

log = logging.getLogger(__name__)

DEFAULT_BANDWIDTH_FRACTION = 0.1
BANDWIDTH_CANDIDATES = np.array([0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3])
MODEL_FORMAT = "fgcca-process-model"
MODEL_VERSION = 1


@dataclass(eq=False)
class ProcessModel:
    """Estimated means, covariance kernels, noise variances and weights.

    Only kernels with ``j <= k`` are stored; :meth:`kernel` returns the
    transpose for ``j > k`` so ``Sigma_kj = Sigma_jk^T`` holds exactly.
    """

    grids: list[TimeGrid]
    means: list[np.ndarray]
    covariances: dict[tuple[int, int], np.ndarray]
    noise_vars: np.ndarray
    norm_weights: np.ndarray
    bandwidths: dict = field(default_factory=dict)
    labels: list[str] | None = None

    def __post_init__(self):
        self.noise_vars = np.asarray(self.noise_vars, dtype=np.float64)
        self.norm_weights = np.asarray(self.norm_weights, dtype=np.float64)
        if np.any(self.noise_vars < 0):
            raise ValidationError("noise variances must be nonnegative")
        if np.any(self.norm_weights <= 0):
            raise ValidationError("normalization weights must be positive")
        for (j, k), K in list(self.covariances.items()):
            if j > k:
                raise ValidationError("store covariance kernels with j <= k only")
            K = np.array(K, dtype=np.float64)
            if j == k and not np.allclose(K, K.T, rtol=0, atol=1e-10):
                raise ValidationError(f"self-covariance {j} is not symmetric")
            K.setflags(write=False)
            self.covariances[(j, k)] = K

    @property
    def J(self) -> int:
        return len(self.grids)

    def has(self, j: int, k: int) -> bool:
        return (min(j, k), max(j, k)) in self.covariances

    def kernel(self, j: int, k: int, normalized: bool = False) -> np.ndarray:
        K = self.covariances[(j, k)] if j <= k else self.covariances[(k, j)].T
        if normalized:
            return K * (self.norm_weights[j] * self.norm_weights[k])
        return K

    def operator(self, j: int, k: int, normalized: bool = False) -> GridOperator:
        return GridOperator(self.grids[j], self.grids[k], self.kernel(j, k, normalized))

    def mean(self, j: int) -> GridFunction:
        return GridFunction(self.grids[j], self.means[j])

    def kernels(self, normalized: bool = True) -> list[list[np.ndarray | None]]:
        """Full J x J table of kernels (``None`` where not estimated)."""
        return [
            [self.kernel(j, k, normalized) if self.has(j, k) else None for k in range(self.J)]
            for j in range(self.J)
        ]

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "labels": self.labels,
            "grids": [g.to_dict() for g in self.grids],
            "means": [np.asarray(m).tolist() for m in self.means],
            "covariances": [
                {"row": j, "col": k, "shape": list(K.shape), "kernel": K.ravel().tolist()}
                for (j, k), K in sorted(self.covariances.items())
            ],
            "noise_vars": self.noise_vars.tolist(),
            "norm_weights": self.norm_weights.tolist(),
            "bandwidths": self.bandwidths,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProcessModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValidationError("not a process-model bundle")
        covs = {
            (c["row"], c["col"]): np.asarray(c["kernel"], dtype=np.float64).reshape(c["shape"])
            for c in d["covariances"]
        }
        return cls(
            grids=[TimeGrid.from_dict(g) for g in d["grids"]],
            means=[np.asarray(m, dtype=np.float64) for m in d["means"]],
            covariances=covs,
            noise_vars=d["noise_vars"],
            norm_weights=d["norm_weights"],
            bandwidths=d.get("bandwidths", {}),
            labels=d.get("labels"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ProcessModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def default_bandwidth(grid: TimeGrid) -> float:
    return DEFAULT_BANDWIDTH_FRACTION * grid.length


def estimate_mean(dataset: LongitudinalDataset, j: int, grid: TimeGrid, bandwidth: float) -> GridFunction:
    """Local-linear smooth of all pooled observations of process ``j``."""
    _, t, u = dataset.arrays(j)
    if np.unique(t).size < 2:
        raise InsufficientDataError(f"process {j} needs at least 2 distinct observation times")
    return GridFunction(grid, local_linear_1d(t, u, grid.points, bandwidth))


def _residuals(dataset: LongitudinalDataset, j: int, mean: GridFunction):
    idx, t, u = dataset.arrays(j)
    return idx, t, u - mean.grid.interpolate(mean.values, t)


def raw_products(dataset, j, k, means, include_diagonal=False):
    """Per-subject raw covariance products ``(s, t, r_j(s) r_k(t))``.

    For ``j == k`` the same-time pairs are dropped unless ``include_diagonal``.
    """
    idx_j, t_j, r_j = _residuals(dataset, j, means[0])
    if j == k:
        idx_k, t_k, r_k = idx_j, t_j, r_j
    else:
        idx_k, t_k, r_k = _residuals(dataset, k, means[1])
    S, T, Z = [], [], []
    bj = np.searchsorted(idx_j, np.arange(dataset.N + 1))
    bk = np.searchsorted(idx_k, np.arange(dataset.N + 1))
    for i in range(dataset.N):
        a = slice(bj[i], bj[i + 1])
        b = slice(bk[i], bk[i + 1])
        if bj[i] == bj[i + 1] or bk[i] == bk[i + 1]:
            continue
        s = np.broadcast_to(t_j[a][:, None], (bj[i + 1] - bj[i], bk[i + 1] - bk[i]))
        t = np.broadcast_to(t_k[b][None, :], s.shape)
        z = r_j[a][:, None] * r_k[b][None, :]
        if j == k and not include_diagonal:
            off = ~np.eye(s.shape[0], dtype=bool)
            s, t, z = s[off], t[off], z[off]
        S.append(s.ravel())
        T.append(t.ravel())
        Z.append(z.ravel())
    if not S:
        return np.empty(0), np.empty(0), np.empty(0)
    return np.concatenate(S), np.concatenate(T), np.concatenate(Z)


def estimate_cross_covariance(
    dataset: LongitudinalDataset,
    j: int,
    k: int,
    grids: tuple[TimeGrid, TimeGrid],
    bandwidth,
    means: tuple[GridFunction, GridFunction],
) -> GridOperator:
    """Smoothed (cross-)covariance surface between processes ``j`` and ``k``.

    ``bandwidth`` is a scalar or a ``(h_j, h_k)`` pair.
    """
    hs, ht = (bandwidth, bandwidth) if np.isscalar(bandwidth) else bandwidth
    s, t, z = raw_products(dataset, j, k, means)
    if s.size == 0:
        raise NoOverlapError(f"no subject observes both process {j} and process {k}")
    K = local_linear_2d(s, t, z, grids[0].points, grids[1].points, hs, ht)
    if j == k:
        K = (K + K.T) / 2
    return GridOperator(grids[0], grids[1], K)


def estimate_noise_variance(
    dataset: LongitudinalDataset,
    j: int,
    mean: GridFunction,
    cov: GridOperator,
    bandwidth: float,
    central_fraction: float = 0.5,
) -> float:
    """Measurement-noise variance from the excess of the raw diagonal over the surface.

    The same-time squared residuals are smoothed along the diagonal; the
    positive part of their excess over the smoothed surface diagonal is
    averaged over the central ``central_fraction`` of the interval.
    """
    if not 0 < central_fraction <= 1:
        raise ValidationError("central_fraction must lie in (0, 1]")
    _, t, r = _residuals(dataset, j, mean)
    grid = mean.grid
    V = local_linear_1d(t, r * r, grid.points, bandwidth)
    excess = np.maximum(V - np.diag(cov.kernel), 0.0)
    cut = (1 - central_fraction) / 2 * grid.length
    inside = (grid.points >= grid.start + cut - 1e-12) & (grid.points <= grid.end - cut + 1e-12)
    w = grid.weights[inside]
    return float(np.dot(w, excess[inside]) / w.sum())


def normalization_weight(cov: GridOperator | np.ndarray, grid: TimeGrid | None = None) -> float:
    """``(integral of Sigma_jj(t, t))^(-1/2)``."""
    if isinstance(cov, GridOperator):
        grid, K = cov.row_grid, cov.kernel
    else:
        K = np.asarray(cov)
    total = float(np.dot(grid.weights, np.diag(K)))
    if not total > 0:
        raise DegenerateProcessError(f"integrated variance {total:g} is not positive")
    return total ** -0.5


def _resolve(value, grids, name):
    if value is None:
        return [default_bandwidth(g) for g in grids]
    if np.isscalar(value):
        return [float(value)] * len(grids)
    value = [float(v) for v in value]
    if len(value) != len(grids):
        raise ValidationError(f"{name} needs one bandwidth per process")
    return value


def estimate_model(
    dataset: LongitudinalDataset,
    grid_size: int = DEFAULT_GRID_SIZE,
    mean_bandwidth=None,
    cov_bandwidth=None,
    pairs=None,
    normalize: bool = True,
    central_fraction: float = 0.5,
    threads: int = 1,
    grids: list[TimeGrid] | None = None,
) -> ProcessModel:
    """Estimate a full :class:`ProcessModel` from sparse data.

    ``mean_bandwidth`` / ``cov_bandwidth`` accept ``None`` (10% of each
    interval), a scalar, one value per process, ``"cv"`` (leave one subject
    out) or ``"gcv"`` (generalized cross-validation). The two selection
    rules apply to the mean only; the covariance then reuses the selected
    bandwidths unless given explicitly.
    ``pairs`` restricts cross-covariances to the given 0-based ``(j, k)``
    pairs; self-covariances are always estimated.
    """
    J = dataset.J
    if grids is None:
        grids = []
        for p in range(1, J + 1):
            a, b = dataset.intervals[p]
            if not np.isfinite(a) or not b > a:
                raise InsufficientDataError(f"process {p} has a degenerate time range")
            grids.append(TimeGrid.uniform(a, b, grid_size))
    if isinstance(mean_bandwidth, str):
        if mean_bandwidth not in ("gcv", "cv"):
            raise ValidationError(f"unknown bandwidth rule {mean_bandwidth!r}")
        h_mean = []
        for p, g in enumerate(grids, start=1):
            idx, t, u = dataset.arrays(p)
            cands = g.length * BANDWIDTH_CANDIDATES
            if mean_bandwidth == "cv":
                h_mean.append(cv_bandwidth_1d(t, u, idx, cands))
            else:
                h_mean.append(gcv_bandwidth_1d(t, u, cands))
        if cov_bandwidth is None:
            cov_bandwidth = h_mean
    else:
        h_mean = _resolve(mean_bandwidth, grids, "mean_bandwidth")
    h_cov = _resolve(cov_bandwidth, grids, "cov_bandwidth")

    means = [estimate_mean(dataset, j + 1, grids[j], h_mean[j]) for j in range(J)]
    if pairs is None:
        todo = [(j, k) for j in range(J) for k in range(j, J)]
    else:
        todo = sorted({(min(a, b), max(a, b)) for a, b in pairs} | {(j, j) for j in range(J)})

    def one(pair):
        j, k = pair
        return estimate_cross_covariance(
            dataset, j + 1, k + 1, (grids[j], grids[k]), (h_cov[j], h_cov[k]), (means[j], means[k])
        ).kernel

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            kernels = list(ex.map(one, todo))
    else:
        kernels = [one(p) for p in todo]
    covs = dict(zip(todo, kernels))

    noise = np.array(
        [
            estimate_noise_variance(
                dataset, j + 1, means[j], GridOperator(grids[j], grids[j], covs[(j, j)]),
                h_cov[j], central_fraction,
            )
            for j in range(J)
        ]
    )
    if normalize:
        weights = np.array([normalization_weight(covs[(j, j)], grids[j]) for j in range(J)])
    else:
        weights = np.ones(J)
    return ProcessModel(
        grids=grids,
        means=[m.values for m in means],
        covariances=covs,
        noise_vars=noise,
        norm_weights=weights,
        bandwidths={"mean": h_mean, "cov": h_cov},
        labels=[dataset.labels[j] for j in range(1, J + 1)],
    )
