"""Synthetic coupled sparse data, desk-scale benchmarks and independent oracles.

The oracles here (eigen/SVD decompositions, Gaussian conditioning) never call
the block-coordinate solver or the BLUP routine they are used to check.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .components import ScoreModel, blup_scores, estimate_components, psd_clamp, reconstruct, subject_samples
from .covariance import ProcessModel, estimate_model
from .data import LongitudinalDataset, SparseSample
from .deflation import fit_higher_order
from .errors import ConfigError, DimensionError, FgccaError
from .grid import GridFunction, TimeGrid
from .solver import FgccaConfig

log = logging.getLogger(__name__)

SPARSITY_BANDS = {
    "dense": (1.0, 1.0),
    "low": (0.8, 1.0),
    "medium": (0.4, 0.8),
    "high": (0.1, 0.4),
}
DEFAULT_VARIANCES = (1.0, 0.8, 0.6, 0.4, 0.2, 0.1)


def fourier_basis(M: int, grid: TimeGrid) -> np.ndarray:
    """First ``M`` orthonormal Fourier functions on the grid interval, shape ``(M, G)``."""
    if M < 1:
        raise ValueError("M must be at least 1")
    L = grid.length
    x = (grid.points - grid.start) / L
    out = np.empty((M, grid.size))
    out[0] = 1.0
    for m in range(1, M):
        k = (m + 1) // 2
        out[m] = np.sqrt(2) * (np.sin(2 * np.pi * k * x) if m % 2 else np.cos(2 * np.pi * k * x))
    return out / np.sqrt(L)


def default_score_cov(J: int, variances=DEFAULT_VARIANCES, rho: float = 0.5) -> np.ndarray:
    """Process-major covariance: ``var_m`` on the diagonal, ``rho * var_m`` across blocks at equal order."""
    v = np.asarray(variances, dtype=np.float64)
    M = v.size
    S = np.zeros((J * M, J * M))
    for j in range(J):
        for k in range(J):
            S[j * M:(j + 1) * M, k * M:(k + 1) * M] = np.diag(v if j == k else rho * v)
    return S


@dataclass
class SimSpec:
    J: int = 3
    M_gen: int = 6
    basis: str = "fourier"
    variances: tuple = DEFAULT_VARIANCES
    rho: float = 0.5
    score_cov: list | None = None
    N: int = 100
    grid_size: int = 50
    sparsity: str = "dense"
    sigma2: float = 1.0
    seed: int = 0
    # estimation side
    M_est: int | None = None
    bandwidth: float = 0.05
    model_grid_size: int = 51

    def __post_init__(self):
        if self.sparsity not in SPARSITY_BANDS:
            raise ConfigError(
                f"invalid sparsity {self.sparsity!r}; choose one of {sorted(SPARSITY_BANDS)}"
            )
        if self.basis != "fourier":
            raise ConfigError("only the fourier basis is supported")
        if self.sigma2 < 0:
            raise ConfigError("sigma2 must be nonnegative")
        self.variances = tuple(float(v) for v in self.variances)
        if len(self.variances) != self.M_gen:
            if self.score_cov is None:
                raise ConfigError("need one variance per generative basis function")
        S = self.covariance()
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() <= 0:
            raise ConfigError("score covariance must be symmetric positive definite")

    def covariance(self) -> np.ndarray:
        if self.score_cov is not None:
            S = np.asarray(self.score_cov, dtype=np.float64)
            if S.shape != (self.J * self.M_gen,) * 2:
                raise ConfigError("score_cov must be (J*M_gen) x (J*M_gen)")
            return S
        return default_score_cov(self.J, self.variances, self.rho)

    @property
    def n_est(self) -> int:
        return self.M_gen if self.M_est is None else self.M_est

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variances"] = list(self.variances)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown simulation option(s): {sorted(unknown)}")
        return cls(**known)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class Truth:
    grid: TimeGrid
    basis: np.ndarray  # (M, G) on the observation grid
    scores: np.ndarray  # (N, J, M)
    trajectories: np.ndarray  # (N, J, G)


def generate(spec: SimSpec, rng=None) -> tuple[LongitudinalDataset, Truth]:
    """Draw scores, build trajectories, add noise and sparsify."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    grid = TimeGrid.uniform(0.0, 1.0, spec.grid_size)
    phi = fourier_basis(spec.M_gen, grid)
    J, M, N = spec.J, spec.M_gen, spec.N
    xi = rng.multivariate_normal(np.zeros(J * M), spec.covariance(), size=N, method="cholesky").reshape(N, J, M)
    X = np.einsum("njm,mg->njg", xi, phi)
    noisy = X + (np.sqrt(spec.sigma2) * rng.standard_normal(X.shape) if spec.sigma2 > 0 else 0.0)
    lo, hi = SPARSITY_BANDS[spec.sparsity]
    G = spec.grid_size
    samples = []
    subjects = [str(i + 1) for i in range(N)]
    for i in range(N):
        for j in range(J):
            if lo == hi == 1.0:
                keep = np.arange(G)
            else:
                rate = rng.uniform(lo, hi)
                n = min(G, max(2, int(round(rate * G))))
                keep = np.sort(rng.choice(G, size=n, replace=False))
            samples.append(SparseSample(subjects[i], j + 1, grid.points[keep], noisy[i, j, keep]))
    ds = LongitudinalDataset(
        samples, J=J, intervals={j: (0.0, 1.0) for j in range(1, J + 1)}, subjects=subjects
    )
    return ds, Truth(grid, phi, xi, X)


def align_signs(est: np.ndarray, truth: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-row sign in {+1, -1} minimizing the integrated squared difference."""
    est = np.atleast_2d(est)
    truth = np.atleast_2d(truth)
    plus = ((est - truth) ** 2 * weights).sum(axis=1)
    minus = ((est + truth) ** 2 * weights).sum(axis=1)
    return np.where(minus < plus, -1.0, 1.0)


def mse_aligned(est_functions, true_functions, weights, est_components=None, true_components=None):
    """Sign-aligned errors per order.

    Functions ``(M, G)`` give integrated squared errors; components
    ``(N, M)`` give mean squared errors using the same per-order sign.
    Returns ``(function_mse, component_mse)`` (the latter ``None`` if no
    components were passed).
    """
    ef = np.atleast_2d(np.asarray(est_functions, dtype=np.float64))
    tf = np.atleast_2d(np.asarray(true_functions, dtype=np.float64))
    if ef.shape != tf.shape:
        raise DimensionError(f"order mismatch: {ef.shape} vs {tf.shape}")
    s = align_signs(ef, tf, weights)
    fmse = (((s[:, None] * ef - tf) ** 2) * weights).sum(axis=1)
    cmse = None
    if est_components is not None:
        ec = np.asarray(est_components, dtype=np.float64)
        tc = np.asarray(true_components, dtype=np.float64)
        if ec.shape != tc.shape or ec.shape[1] != ef.shape[0]:
            raise DimensionError("component arrays must be (N, M) matching the functions")
        cmse = ((s[None, :] * ec - tc) ** 2).mean(axis=0)
    return fmse, cmse


def component_mse_aligned(est_components, true_components) -> np.ndarray:
    """Per-order component MSE with the sign chosen on the components themselves."""
    ec = np.asarray(est_components, dtype=np.float64)
    tc = np.asarray(true_components, dtype=np.float64)
    if ec.shape != tc.shape:
        raise DimensionError("order mismatch")
    plus = ((ec - tc) ** 2).mean(axis=0)
    minus = ((ec + tc) ** 2).mean(axis=0)
    return np.minimum(plus, minus)


# ---------------------------------------------------------------- oracles


def fpca_oracle(K: np.ndarray, grid: TimeGrid, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``n`` eigenvalues and L2-orthonormal eigenfunctions of a kernel."""
    d = np.sqrt(grid.weights)
    vals, vecs = np.linalg.eigh(d[:, None] * ((K + K.T) / 2) * d[None, :])
    order = np.argsort(vals)[::-1][:n]
    return vals[order], (vecs[:, order] / d[:, None]).T


def fsvd_oracle(K: np.ndarray, row: TimeGrid, col: TimeGrid, n: int):
    """Leading ``n`` singular triplets ``(s, U, V)`` of a cross-covariance kernel."""
    dr, dc = np.sqrt(row.weights), np.sqrt(col.weights)
    U, s, Vt = np.linalg.svd(dr[:, None] * K * dc[None, :])
    return s[:n], (U[:, :n] / dr[:, None]).T, Vt[:n] / dc[None, :]


def gaussian_conditioning(F: np.ndarray, S: np.ndarray, noise: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """``E[xi | U]`` by assembling the joint covariance of ``(U, xi)`` and conditioning."""
    n = F.shape[0]
    q = S.shape[0]
    A = np.block([[F, np.eye(n)], [np.eye(q), np.zeros((q, n))]])
    B = np.block([[S, np.zeros((q, n))], [np.zeros((n, q)), np.diag(noise)]])
    joint = A @ B @ A.T
    Suu, Sxu = joint[:n, :n], joint[n:, :n]
    return Sxu @ np.linalg.solve(Suu, resid)


def score_model_from_basis(model: ProcessModel, basis: list[np.ndarray], mode="orthogonal", joint=True) -> ScoreModel:
    """Score model for an arbitrary per-block basis (used for the oracle pipelines)."""
    J = model.J
    n = basis[0].shape[0]
    S = np.zeros((J * n, J * n))
    for j in range(J):
        Bj = basis[j] * model.grids[j].weights
        for k in range(j, J):
            if (j != k and not joint) or not model.has(j, k):
                continue
            blk = Bj @ model.kernel(j, k) @ (basis[k] * model.grids[k].weights).T
            S[j * n:(j + 1) * n, k * n:(k + 1) * n] = blk
            S[k * n:(k + 1) * n, j * n:(j + 1) * n] = blk.T
    S, clamped = psd_clamp(S)
    return ScoreModel(list(model.grids), [np.asarray(b) for b in basis], S, model.noise_vars,
                      [np.asarray(m) for m in model.means], mode, clamped)


# ---------------------------------------------------------------- reports


@dataclass
class BenchReport:
    name: str
    spec: dict
    rows: list[dict] = field(default_factory=list)
    replicates: int = 0
    failures: int = 0
    runtime: float = 0.0

    def mean(self, metric: str, **where) -> float:
        vals = [r[metric] for r in self.rows if all(r.get(k) == v for k, v in where.items())]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        keys = sorted({tuple((k, r[k]) for k in r if k not in _METRICS and k != "replicate") for r in self.rows})
        groups = []
        for key in keys:
            where = dict(key)
            entry = dict(where)
            for metric in _METRICS:
                if any(metric in r for r in self.rows):
                    entry[metric] = self.mean(metric, **where)
            groups.append(entry)
        return {
            "name": self.name,
            "spec": self.spec,
            "replicates": self.replicates,
            "failures": self.failures,
            "runtime_seconds": self.runtime,
            "groups": groups,
        }

    def file_stem(self) -> str:
        digest = hashlib.sha256(json.dumps(self.spec, sort_keys=True).encode()).hexdigest()[:12]
        return f"{self.name}_seed{self.spec.get('seed', 0)}_{digest}"

    def write(self, out_dir, include_runtime: bool = True) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = self.file_stem()
        cols = []
        for r in self.rows:
            for k in r:
                if k not in cols:
                    cols.append(k)
        csv_path = out / f"{stem}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        summary = self.summary()
        if not include_runtime:
            summary.pop("runtime_seconds")
        json_path = out / f"{stem}.json"
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        return csv_path, json_path


_METRICS = ("component_mse", "function_mse", "mrse")


def _replicate_rngs(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _fit(ds, spec, J, n):
    model = estimate_model(ds, grid_size=spec.model_grid_size, mean_bandwidth=spec.bandwidth,
                           cov_bandwidth=spec.bandwidth)
    cfg = FgccaConfig.full(J, tau=1.0, scheme="identity", n_components=n,
                           deflation="orthogonal", epsilon=1e-10)
    return model, fit_higher_order(model, cfg)


def _sim1_replicate(args):
    spec, rng = args
    ds, truth = generate(spec, rng)
    n = spec.n_est
    model, fit = _fit(ds, spec, spec.J, n)
    sm = ScoreModel.from_fit(model, fit)
    blup = estimate_components(ds, sm, "blup").xi
    quad = estimate_components(ds, sm, "quadrature", max_gap_fraction=1.0).xi
    mg = model.grids[0]
    phi = fourier_basis(spec.M_gen, mg)[:n]
    rows = []
    for method, xi in (("blup", blup), ("quadrature", quad)):
        per = []
        for j in range(spec.J):
            fm, cm = mse_aligned(fit.basis(j), phi, mg.weights, xi[:, j, :], truth.scores[:, j, :n])
            per.append((fm, cm))
        for m in range(n):
            rows.append({
                "method": method,
                "order": m + 1,
                "component_mse": float(np.mean([c[m] for _, c in per])),
                "function_mse": float(np.mean([f[m] for f, _ in per])),
            })
    return rows


def _sim2_replicate(args):
    spec, rng = args
    ds, truth = generate(spec, rng)
    n = spec.n_est
    model, fit = _fit(ds, spec, 2, n)
    mg = model.grids
    phi = fourier_basis(spec.M_gen, mg[0])[:n]
    K12 = model.kernel(0, 1)
    _, U, V = fsvd_oracle(K12, mg[0], mg[1], n)
    fpca = [fpca_oracle(model.kernel(j, j), mg[j], n)[1] for j in range(2)]
    bases = {
        "fgcca": ([fit.basis(0), fit.basis(1)], True),
        "fsvd": ([U, V], True),
        "fpca": (fpca, False),
    }
    rows = []
    for method, (basis, joint) in bases.items():
        sm = score_model_from_basis(model, basis, joint=joint)
        xi = estimate_components(ds, sm, "blup").xi
        per = [mse_aligned(basis[j], phi, mg[j].weights, xi[:, j, :], truth.scores[:, j, :n]) for j in range(2)]
        for m in range(n):
            rows.append({
                "method": method,
                "order": m + 1,
                "function_mse": float(np.mean([f[m] for f, _ in per])),
                "component_mse": float(np.mean([c[m] for _, c in per])),
            })
    return rows


def mrse(est: np.ndarray, truth: np.ndarray, weights: np.ndarray) -> float:
    """Mean over subjects of ``int (est - truth)^2 / int truth^2``."""
    num = ((est - truth) ** 2 * weights).sum(axis=-1)
    den = (truth ** 2 * weights).sum(axis=-1)
    return float(np.mean(num / den))


def _sim3_replicate(args):
    spec, rng = args
    ds, truth = generate(spec, rng)
    n = spec.n_est
    model, fit = _fit(ds, spec, spec.J, n)
    og = truth.grid
    rows = []
    for k in range(1, n + 1):
        sm = ScoreModel.from_fit(model, fit, k)
        est = np.empty_like(truth.trajectories)
        for i, sid in enumerate(ds.subjects):
            xi = blup_scores(subject_samples(ds, sid), sm)
            traj = reconstruct(xi, sm, grids=[og] * spec.J)
            est[i] = np.array([t.values for t in traj])
        rows.append({"method": "fgcca", "order": k, "mrse": mrse(est, truth.trajectories, og.weights)})
    return rows


_RUNNERS = {"sim1": _sim1_replicate, "sim2": _sim2_replicate, "sim3": _sim3_replicate}


def _run(name: str, spec: SimSpec, replicates: int, threads: int = 1, extra: dict | None = None) -> BenchReport:
    if name == "sim2" and spec.J != 2:
        spec = SimSpec.from_dict({**spec.to_dict(), "J": 2, "score_cov": None})
    runner = _RUNNERS[name]
    t0 = time.perf_counter()
    jobs = [(spec, rng) for rng in _replicate_rngs(spec.seed, replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_safe, [runner] * len(jobs), jobs))
    else:
        results = [_safe(runner, job) for job in jobs]
    report = BenchReport(name, spec.to_dict(), replicates=replicates)
    for r, rows in enumerate(results):
        if rows is None:
            report.failures += 1
            continue
        for row in rows:
            report.rows.append({"replicate": r + 1, **(extra or {}), **row})
    report.runtime = time.perf_counter() - t0
    return report


def _safe(runner, job):
    try:
        return runner(job)
    except (FgccaError, np.linalg.LinAlgError) as exc:
        log.warning("replicate failed: %s", exc)
        return None


def run_sim1(spec: SimSpec, replicates: int = 20, threads: int = 1) -> BenchReport:
    """BLUP versus quadrature component errors for J = 3 processes."""
    return _run("sim1", spec, replicates, threads)


def run_sim2(spec: SimSpec, replicates: int = 20, threads: int = 1) -> BenchReport:
    """FGCCA versus eigen (FPCA) and SVD (FSVD) oracles for J = 2 processes."""
    return _run("sim2", spec, replicates, threads)


def run_sim3(spec: SimSpec, replicates: int = 20, threads: int = 1, Ns=None, sparsities=None) -> BenchReport:
    """Reconstruction MRSE for nested orders, optionally across N and sparsity levels."""
    Ns = [spec.N] if Ns is None else list(Ns)
    sparsities = [spec.sparsity] if sparsities is None else list(sparsities)
    merged = None
    for N in Ns:
        for sp in sparsities:
            sub = SimSpec.from_dict({**spec.to_dict(), "N": N, "sparsity": sp})
            rep = _run("sim3", sub, replicates, threads, extra={"N": N, "sparsity": sp})
            if merged is None:
                merged = rep
                merged.spec = {**spec.to_dict(), "Ns": Ns, "sparsities": sparsities}
            else:
                merged.rows.extend(rep.rows)
                merged.failures += rep.failures
                merged.runtime += rep.runtime
    return merged


# ---------------------------------------------------------------- recipes


def logistic_fit(X: np.ndarray, y: np.ndarray, ridge: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Logistic regression coefficients (intercept first) by Newton-Raphson."""
    X = np.column_stack([np.ones(len(X)), np.asarray(X, dtype=np.float64)])
    y = np.asarray(y, dtype=np.float64)
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-X @ beta))
        H = (X * (p * (1 - p))[:, None]).T @ X + ridge * np.eye(X.shape[1])
        step = np.linalg.solve(H, X.T @ (y - p) - ridge * beta)
        beta += step
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


def logistic_predict(beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = np.column_stack([np.ones(len(X)), np.asarray(X, dtype=np.float64)])
    return 1.0 / (1.0 + np.exp(-X @ beta))


def weighted_vote(train_components: np.ndarray, y_train, test_components: np.ndarray) -> np.ndarray:
    """Outcome probability from one logistic model per block on its first component.

    Block predictions are averaged with weights ``|corr(component, y)|``.
    Components have shape ``(N, J)``.
    """
    y_train = np.asarray(y_train, dtype=np.float64)
    J = train_components.shape[1]
    probs, weights = [], []
    for j in range(J):
        beta = logistic_fit(train_components[:, [j]], y_train)
        probs.append(logistic_predict(beta, test_components[:, [j]]))
        c = np.corrcoef(train_components[:, j], y_train)[0, 1]
        weights.append(0.0 if not np.isfinite(c) else abs(c))
    w = np.asarray(weights)
    if w.sum() == 0:
        w = np.ones(J)
    return np.average(np.array(probs), axis=0, weights=w)


def last_point_benchmark(train: LongitudinalDataset, test: LongitudinalDataset, spec_bandwidth=None, n_components=3,
                         grid_size=51):
    """Predict each test subject's last observation per process from the rest.

    Compares the joint FGCCA pipeline with a per-process eigenbasis (FPCA
    oracle) pipeline on the same smoothed model. Returns per-subject
    squared errors for both, shape ``(N_test, J)`` each.
    """
    model = estimate_model(train, grid_size=grid_size, mean_bandwidth=spec_bandwidth, cov_bandwidth=spec_bandwidth)
    J = model.J
    cfg = FgccaConfig.full(J, n_components=n_components, epsilon=1e-10)
    fit = fit_higher_order(model, cfg)
    sm_fgcca = ScoreModel.from_fit(model, fit)
    fpca = [fpca_oracle(model.kernel(j, j), model.grids[j], n_components)[1] for j in range(J)]
    sm_fpca = score_model_from_basis(model, fpca, joint=False)
    errs = {"fgcca": np.full((test.N, J), np.nan), "fpca": np.full((test.N, J), np.nan)}
    for i, sid in enumerate(test.subjects):
        full = subject_samples(test, sid)
        partial, targets, truth = [], [], []
        for s in full:
            if s.n >= 2:
                partial.append(SparseSample(sid, s.process_id, s.times[:-1], s.values[:-1]))
                targets.append(s.times[-1:])
                truth.append(s.values[-1])
            else:
                partial.append(s)
                targets.append(np.empty(0))
                truth.append(np.nan)
        for name, sm in (("fgcca", sm_fgcca), ("fpca", sm_fpca)):
            xi = blup_scores(partial, sm)
            traj = reconstruct(xi, sm)
            for j in range(J):
                if targets[j].size:
                    pred = traj[j].grid.interpolate(traj[j].values, targets[j])[0]
                    errs[name][i, j] = (pred - truth[j]) ** 2
    return errs
