"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or ``python tests/test_acceptance.py``.
"""

import functools
import itertools
import logging
import time

import numpy as np
import pytest

from fgcca.cli import main as cli_main
from fgcca.components import ScoreModel, blup_scores, decorrelate, estimate_components, quadrature_scores, _design
from fgcca.covariance import estimate_model
from fgcca.data import SparseSample, write_csv
from fgcca.deflation import fit_higher_order
from fgcca.grid import TimeGrid
from fgcca.simulation import (
    SimSpec,
    fourier_basis,
    fpca_oracle,
    fsvd_oracle,
    gaussian_conditioning,
    generate,
    run_sim1,
    run_sim3,
)
from fgcca.solver import FgccaConfig, Problem, build_metric, run_bca
from helpers import as_table, cosine, random_design, random_joint_cov

RESULTS: dict[int, str] = {}


def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                line = f"FAIL  {number:2d} {title}: {exc}".splitlines()[0]
                RESULTS[number] = line
                print(line)
                raise
            line = f"PASS  {number:2d} {title} ({time.perf_counter() - t0:.1f}s) {detail}".rstrip()
            RESULTS[number] = line
            print(line)

        return run

    return wrap


def _metrics(grids, kernels, cfg):
    return [build_metric(j, cfg, as_table(grids, kernels)) for j in range(len(grids))]


@criterion(1, "monotone ascent over randomized fits")
def test_monotone_ascent_randomized():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, n = np.inf, 0
    combos = list(itertools.product((2, 3), ("identity", "square", "abs"), (0.3, 0.7, 1.0)))
    for rep in range(17):
        for J, scheme, tau in combos:
            grids, kernels = random_joint_cov(rng, J, rank=3)
            cfg = FgccaConfig(random_design(rng, J), tau=tau, scheme=scheme, epsilon=1e-12,
                              max_iters=200, init="random", seed=int(rng.integers(1 << 30)))
            prob = Problem(grids, kernels, cfg.C, scheme)
            st = run_bca(prob, _metrics(grids, kernels, cfg), cfg)
            worst = min(worst, float(np.min(np.diff(st.criterion_trace))))
            n += 1
    elapsed = time.perf_counter() - t0
    assert n >= 300
    assert worst >= -1e-10, f"criterion decreased by {-worst:.3g}"
    assert elapsed < 120, f"took {elapsed:.0f}s"
    return f"[{n} fits, min step {worst:.2e}]"


@criterion(2, "analytic gradient against central differences")
def test_gradient_finite_differences():
    rng = np.random.default_rng(202)
    worst = 0.0
    for model in range(10):
        J = int(rng.integers(2, 4))
        scheme = ("identity", "square", "abs")[model % 3]
        grids, kernels = random_joint_cov(rng, J)
        C = random_design(rng, J)
        prob = Problem(grids, kernels, C, scheme)
        F = [rng.standard_normal(g.size) for g in grids]
        for _ in range(20):
            j = int(rng.integers(J))
            e = rng.standard_normal(grids[j].size)
            analytic = float(np.dot(grids[j].weights * prob.gradient(F, j), e))
            h = 1e-5
            Fp = [f.copy() for f in F]
            Fm = [f.copy() for f in F]
            Fp[j] += h * e
            Fm[j] -= h * e
            fd = (prob.criterion(Fp) - prob.criterion(Fm)) / (2 * h)
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd))
            worst = max(worst, rel)
    assert worst <= 1e-5, f"relative error {worst:.3g}"
    return f"[max relative error {worst:.1e}]"


def _solve_orders(grids, kernels, cfg):
    return fit_higher_order(as_table(grids, kernels), cfg)


@criterion(3, "two-block identity fit equals the cross-covariance SVD")
def test_fsvd_subsumption():
    rng = np.random.default_rng(303)
    worst = 1.0
    for init in ("deterministic-svd", "random"):
        for _ in range(3):
            grids, kernels = random_joint_cov(rng, 2, rank=5)
            cfg = FgccaConfig.full(2, tau=1.0, scheme="identity", n_components=3, epsilon=1e-15,
                                   max_iters=20000, init=init, seed=int(rng.integers(1 << 30)))
            fit = _solve_orders(grids, kernels, cfg)
            _, U, V = fsvd_oracle(kernels[0][1], grids[0], grids[1], 3)
            for m in range(3):
                worst = min(worst, abs(cosine(fit.functions[m][0], U[m], grids[0].weights)),
                            abs(cosine(fit.functions[m][1], V[m], grids[1].weights)))
    assert worst >= 1 - 1e-8, f"|cosine| {worst:.12f}"
    return f"[min |cosine| = 1 - {1 - worst:.1e}]"


@criterion(4, "duplicated-process fit equals the covariance eigenfunctions")
def test_fpca_subsumption():
    rng = np.random.default_rng(404)
    worst = 1.0
    for init in ("deterministic-svd", "random"):
        for _ in range(3):
            grids, kernels = random_joint_cov(rng, 1, rank=5)
            g, K = grids[0], kernels[0][0]
            dup = [[K, K], [K, K]]
            cfg = FgccaConfig.full(2, tau=1.0, n_components=3, epsilon=1e-15, max_iters=20000,
                                   init=init, seed=int(rng.integers(1 << 30)))
            fit = _solve_orders([g, g], dup, cfg)
            _, E = fpca_oracle(K, g, 3)
            for m in range(3):
                for j in range(2):
                    worst = min(worst, abs(cosine(fit.functions[m][j], E[m], g.weights)))
    assert worst >= 1 - 1e-8, f"|cosine| {worst:.12f}"
    return f"[min |cosine| = 1 - {1 - worst:.1e}]"


@criterion(5, "deflation annihilates, orthonormalizes and orthogonalizes")
def test_deflation_properties():
    from fgcca.deflation import _deflate_all

    rng = np.random.default_rng(505)
    ann, gram, orth = 0.0, 0.0, 0.0
    for _ in range(5):
        J = 3
        grids, kernels = random_joint_cov(rng, J, rank=6)
        w = [g.weights for g in grids]
        for mode in ("orthogonal", "uncorrelated"):
            F = [rng.standard_normal(g.size) for g in grids]
            F = [f / np.sqrt(np.dot(w[j] * f, f)) for j, f in enumerate(F)]
            Kd, _, _ = _deflate_all(kernels, None, grids, F, mode)
            for j in range(J):
                for k in range(J):
                    scale = np.abs(kernels[j][k]).max()
                    ann = max(ann, np.abs(Kd[j][k] @ (w[k] * F[k])).max() / scale,
                              np.abs((w[j] * F[j]) @ Kd[j][k]).max() / scale)
            cfg = FgccaConfig.full(J, tau=1.0, n_components=4, deflation=mode, epsilon=1e-12)
            fit = _solve_orders(grids, kernels, cfg)
            for j in range(J):
                if mode == "orthogonal":
                    gram = max(gram, np.abs(fit.gram(j) - np.eye(4)).max())
                else:
                    G = fit.gram(j)
                    orth = max(orth, max(abs(G[m, m + 1]) for m in range(3)))
    assert ann <= 1e-10, f"annihilation residual {ann:.3g}"
    assert gram <= 1e-8, f"Gram deviation {gram:.3g}"
    assert orth <= 1e-8, f"consecutive inner product {orth:.3g}"
    return f"[annihilation {ann:.1e}, Gram {gram:.1e}, consecutive {orth:.1e}]"


def _random_score_model(rng, J, M, G):
    grids = [TimeGrid.uniform(0, 1, G) for _ in range(J)]
    basis = [rng.standard_normal((M, G)) for _ in range(J)]
    A = rng.standard_normal((J * M, J * M))
    S = A @ A.T / (J * M)
    return ScoreModel(grids, basis, S, rng.uniform(0.05, 1.0, J), [rng.standard_normal(G) for _ in range(J)])


@criterion(6, "conditional-expectation scores")
def test_blup_against_conditioning_and_quadrature():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(100):
        J, M = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        sm = _random_score_model(rng, J, M, 11)
        samples = []
        for j in range(J):
            n = int(rng.integers(0, 6))
            t = np.sort(rng.choice(sm.grids[j].points, size=n, replace=False)) if n else np.empty(0)
            samples.append(SparseSample("s", j + 1, t, rng.standard_normal(n)) if n else None)
        xi = blup_scores(samples, sm)
        F, r, noise = _design(samples, sm)
        ref = np.zeros(J * M) if F is None else gaussian_conditioning(F, sm.score_cov, noise, r)
        worst = max(worst, np.abs(xi - ref).max())
    assert worst <= 1e-10, f"BLUP vs conditioning {worst:.3g}"

    # dense noiseless limit against quadrature, true orthonormal basis
    grid = TimeGrid.uniform(0, 1, 401)
    phi = fourier_basis(5, grid)
    S = np.diag([1.0, 0.8, 0.6, 0.4, 0.2])
    sm = ScoreModel([grid], [phi], S, [0.0], [np.zeros(grid.size)])
    gap = 0.0
    for _ in range(20):
        xi = rng.multivariate_normal(np.zeros(5), S)
        s = SparseSample("s", 1, grid.points, xi @ phi)
        gap = max(gap, np.abs(blup_scores([s], sm) - quadrature_scores([s], sm)).max())
    assert gap <= 1e-4, f"BLUP vs quadrature {gap:.3g}"
    return f"[conditioning {worst:.1e}, dense-limit gap {gap:.1e}]"


@criterion(7, "BLUP beats quadrature on sparse data")
def test_simulation_blup_advantage():
    logging.disable(logging.WARNING)
    try:
        t0 = time.perf_counter()
        high = run_sim1(SimSpec(J=3, N=100, sigma2=1.0, sparsity="high", seed=7), replicates=20, threads=2)
        dense = run_sim1(SimSpec(J=3, N=100, sigma2=1.0, sparsity="dense", seed=8), replicates=20, threads=2)
        elapsed = time.perf_counter() - t0
    finally:
        logging.disable(logging.NOTSET)
    msgs = []
    for m in (4, 5, 6):
        b = high.mean("component_mse", method="blup", order=m)
        q = high.mean("component_mse", method="quadrature", order=m)
        assert b < q, f"high sparsity order {m}: BLUP {b:.4f} >= quadrature {q:.4f}"
        msgs.append(f"o{m} {b:.3f}<{q:.3f}")
    ratio = 0.0
    for m in range(1, 7):
        b = dense.mean("component_mse", method="blup", order=m)
        q = dense.mean("component_mse", method="quadrature", order=m)
        assert b <= 1.05 * q, f"dense order {m}: BLUP {b:.4f} more than 5% above quadrature {q:.4f}"
        ratio = max(ratio, b / q)
    assert elapsed < 600, f"took {elapsed:.0f}s"
    return f"[{', '.join(msgs)}; dense worst ratio {ratio:.3f}]"


@criterion(8, "reconstruction error falls with N and with M")
def test_simulation_reconstruction_trends():
    logging.disable(logging.WARNING)
    try:
        t0 = time.perf_counter()
        byN = run_sim3(SimSpec(J=3, sigma2=1.0, sparsity="medium", seed=9), replicates=20, threads=2, Ns=[25, 100])
        byM = run_sim3(SimSpec(J=3, N=100, sigma2=0.0, sparsity="medium", seed=10), replicates=20, threads=2)
        elapsed = time.perf_counter() - t0
    finally:
        logging.disable(logging.NOTSET)
    e25 = byN.mean("mrse", N=25, order=6)
    e100 = byN.mean("mrse", N=100, order=6)
    assert e100 < e25, f"MRSE N=100 {e100:.4f} >= N=25 {e25:.4f}"
    curve = [byM.mean("mrse", order=m) for m in range(1, 7)]
    assert all(b < a for a, b in zip(curve, curve[1:])), f"MRSE over M not decreasing: {curve}"
    assert elapsed < 600, f"took {elapsed:.0f}s"
    return f"[N: {e25:.3f} -> {e100:.3f}; M: {curve[0]:.3f} -> {curve[-1]:.3f}]"


@criterion(9, "uncorrelated components within each process")
def test_uncorrelated_components():
    logging.disable(logging.WARNING)
    try:
        worst = 0.0
        for seed in range(5):
            ds, _ = generate(SimSpec(J=3, N=60, sparsity=("dense", "medium", "high")[seed % 3], seed=seed))
            model = estimate_model(ds, mean_bandwidth=0.05, cov_bandwidth=0.05)
            cfg = FgccaConfig.full(3, n_components=4, deflation="uncorrelated", epsilon=1e-10)
            fit = fit_higher_order(model, cfg)
            comps = estimate_components(ds, ScoreModel.from_fit(model, fit))
            for j in range(3):
                R = np.corrcoef(comps.y[:, j, :].T)
                worst = max(worst, np.abs(R - np.eye(4)).max())
    finally:
        logging.disable(logging.NOTSET)
    # also on arbitrary score matrices
    rng = np.random.default_rng(909)
    for _ in range(20):
        xi = rng.standard_normal((30, 2, 5)) @ rng.standard_normal((5, 5))
        y = decorrelate(xi, "uncorrelated").y
        for j in range(2):
            worst = max(worst, np.abs(np.corrcoef(y[:, j, :].T) - np.eye(5)).max())
    assert worst <= 1e-8, f"correlation {worst:.3g}"
    return f"[max |correlation| {worst:.1e}]"


@criterion(10, "response extension: monotone ascent and PLS equivalence")
def test_response_extension():
    rng = np.random.default_rng(1010)
    worst = np.inf
    for i in range(50):
        J = int(rng.integers(1, 4))
        grids, kernels = random_joint_cov(rng, J, rank=3)
        p = int(rng.integers(1, 4))
        resp = [rng.standard_normal((g.size, p)) @ np.diag(rng.uniform(0.2, 1, p)) for g in grids]
        C = random_design(rng, J) if J > 1 else np.zeros((1, 1))
        cfg = FgccaConfig(C, tau=(0.3, 0.7, 1.0)[i % 3], scheme=("identity", "square", "abs")[i % 3],
                          epsilon=1e-12, max_iters=300, init="random", seed=i)
        prob = Problem(grids, kernels, C, cfg.scheme, resp)
        st = run_bca(prob, _metrics(grids, kernels, cfg), cfg)
        worst = min(worst, float(np.min(np.diff(st.criterion_trace))))
    assert worst >= -1e-10, f"criterion decreased by {-worst:.3g}"

    cmin = 1.0
    for _ in range(3):
        grids, kernels = random_joint_cov(rng, 1, rank=4)
        g = grids[0]
        KY = fourier_basis(9, g).T @ rng.standard_normal((9, 3))
        cfg = FgccaConfig(np.zeros((1, 1)), n_components=3, epsilon=1e-15, max_iters=20000,
                          init="random", seed=int(rng.integers(1 << 30)))
        fit = fit_higher_order(as_table(grids, kernels), cfg, response=[KY])
        d = np.sqrt(g.weights)
        U, s, Vt = np.linalg.svd(d[:, None] * KY, full_matrices=False)
        for m in range(3):
            cmin = min(cmin, abs(cosine(fit.functions[m][0], U[:, m] / d, g.weights)),
                       abs(float(np.dot(fit.response_weights[m], Vt[m]))))
    assert cmin >= 1 - 1e-8, f"|cosine| {cmin:.12f}"
    return f"[min step {worst:.1e}; PLS |cosine| = 1 - {1 - cmin:.1e}]"


@criterion(11, "byte-identical CLI outputs across runs and thread counts")
def test_cli_determinism(tmp_path, capsys):
    logging.disable(logging.WARNING)
    try:
        ds, _ = generate(SimSpec(J=3, N=30, sparsity="medium", seed=11))
    finally:
        logging.disable(logging.NOTSET)
    data = tmp_path / "data.csv"
    write_csv(ds, data)
    cfg = tmp_path / "cfg.toml"
    cfg.write_text('[solver]\nn_components = 3\ninit = "random"\n\n[model]\ncov_bandwidth = 0.08\n')
    sim = tmp_path / "sim.json"
    sim.write_text('{"sim": "sim1", "N": 30, "sparsity": "medium", "replicates": 3}')
    runs = {
        "fit": lambda out, th: ["fit", str(data), "--config", str(cfg), "--seed", "5", "--threads", th, "--out", out],
        "simulate": lambda out, th: ["simulate", str(sim), "--seed", "5", "--threads", th, "--out", out],
    }
    compared = 0
    for name, argv in runs.items():
        outs = []
        for k, th in enumerate(("1", "1", "3")):
            out = tmp_path / f"{name}{k}"
            assert cli_main(argv(str(out), th)) == 0
            outs.append(out)
        files = sorted(p.name for p in outs[0].iterdir() if p.name not in ("manifest.json", "run.log"))
        assert files
        for other in outs[1:]:
            for f in files:
                assert (outs[0] / f).read_bytes() == (other / f).read_bytes(), f"{name}: {f} differs"
                compared += 1
    capsys.readouterr()
    return f"[{compared} file comparisons]"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
