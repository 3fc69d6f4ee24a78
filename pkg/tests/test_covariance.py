import json

import numpy as np
import pytest

from fgcca.covariance import (
    ProcessModel,
    estimate_cross_covariance,
    estimate_mean,
    estimate_model,
    estimate_noise_variance,
    normalization_weight,
)
from fgcca.data import LongitudinalDataset, SparseSample
from fgcca.errors import InsufficientDataError, NoOverlapError
from fgcca.grid import GridOperator, TimeGrid

T50 = np.linspace(0, 1, 50)


def _dataset(curves, times=T50):
    """``curves[j]`` is an ``(N, len(times))`` array of observed values."""
    samples = [
        SparseSample(str(i), j + 1, times, c[i])
        for j, c in enumerate(curves)
        for i in range(c.shape[0])
    ]
    return LongitudinalDataset(samples)


def _rank_one(rng, N=200, noise=0.0):
    phi = np.sin(np.pi * T50)
    # exact unit sample variance so the oracle phi phi^T is the sample target too
    xi = rng.standard_normal(N)
    xi = (xi - xi.mean()) / xi.std()
    X = xi[:, None] * phi[None, :]
    return X + noise * rng.standard_normal(X.shape), phi


def test_mean_reproduces_constants_and_lines():
    g = TimeGrid.uniform(0, 1, 21)
    ds = _dataset([np.full((5, 50), 2.5)])
    np.testing.assert_allclose(estimate_mean(ds, 1, g, 0.1).values, 2.5, atol=1e-12)
    ds = _dataset([np.tile(1.0 - 2.0 * T50, (5, 1))])
    np.testing.assert_allclose(estimate_mean(ds, 1, g, 0.1).values, 1.0 - 2.0 * g.points, atol=1e-8)


def test_mean_of_noisy_sine():
    rng = np.random.default_rng(0)
    Y = np.sin(2 * np.pi * T50) + 0.5 * rng.standard_normal((100, 50))
    g = TimeGrid.uniform(0, 1, 51)
    est = estimate_mean(_dataset([Y]), 1, g, 0.1).values
    assert np.abs(est - np.sin(2 * np.pi * g.points)).max() < 0.1


def test_mean_needs_two_times():
    ds = _dataset([np.ones((3, 1))], times=np.array([0.5]))
    with pytest.raises(InsufficientDataError):
        estimate_mean(ds, 1, TimeGrid.uniform(0, 1, 5), 0.3)


def _means(ds, grids, h=0.1):
    return [estimate_mean(ds, j + 1, g, h) for j, g in enumerate(grids)]


def test_rank_one_surface_and_zero_noise():
    rng = np.random.default_rng(1)
    X, phi = _rank_one(rng)
    g = TimeGrid.uniform(0, 1, 50)
    ds = _dataset([X])
    (mu,) = _means(ds, [g])
    K = estimate_cross_covariance(ds, 1, 1, (g, g), 0.1, (mu, mu))
    assert K.is_symmetric(0.0)
    assert np.abs(K.kernel - np.outer(phi, phi)).max() < 0.1
    assert estimate_noise_variance(ds, 1, mu, K, 0.1) <= 0.05


def test_noise_variance_recovers_unit_noise():
    rng = np.random.default_rng(2)
    X, _ = _rank_one(rng, noise=1.0)
    g = TimeGrid.uniform(0, 1, 50)
    ds = _dataset([X])
    (mu,) = _means(ds, [g])
    K = estimate_cross_covariance(ds, 1, 1, (g, g), 0.1, (mu, mu))
    assert 0.8 <= estimate_noise_variance(ds, 1, mu, K, 0.1) <= 1.2


def test_noise_variance_clamps_at_zero():
    rng = np.random.default_rng(3)
    X, _ = _rank_one(rng, N=30)
    g = TimeGrid.uniform(0, 1, 50)
    ds = _dataset([X])
    (mu,) = _means(ds, [g])
    huge = GridOperator(g, g, 100.0 * np.eye(50))
    assert estimate_noise_variance(ds, 1, mu, huge, 0.1) == 0.0


def test_independent_and_identical_processes():
    rng = np.random.default_rng(4)
    X1, _ = _rank_one(rng)
    X2, _ = _rank_one(rng)
    g = TimeGrid.uniform(0, 1, 50)
    ds = _dataset([X1, X2, X1])
    mus = _means(ds, [g, g, g])
    K12 = estimate_cross_covariance(ds, 1, 2, (g, g), 0.1, (mus[0], mus[1]))
    assert np.abs(K12.kernel).max() < 0.1
    K11 = estimate_cross_covariance(ds, 1, 1, (g, g), 0.1, (mus[0], mus[0]))
    K13 = estimate_cross_covariance(ds, 1, 3, (g, g), 0.1, (mus[0], mus[2]))
    assert np.abs(K13.kernel - K11.kernel).max() < 0.05


def test_no_overlap():
    a = SparseSample("a", 1, [0.0, 0.5, 1.0], [1.0, 2.0, 0.0])
    b = SparseSample("b", 2, [0.0, 0.5, 1.0], [1.0, 2.0, 0.0])
    c = SparseSample("c", 1, [0.1, 0.6, 0.9], [0.0, 1.0, 2.0])
    d = SparseSample("d", 2, [0.2, 0.4, 0.8], [3.0, 1.0, 2.0])
    ds = LongitudinalDataset([a, b, c, d])
    g = TimeGrid.uniform(0, 1, 5)
    mus = _means(ds, [g, g], h=0.6)
    with pytest.raises(NoOverlapError):
        estimate_cross_covariance(ds, 1, 2, (g, g), 0.6, tuple(mus))


@pytest.mark.parametrize("level, expected", [(1.0, 1.0), (4.0, 0.5)])
def test_normalization_weight_constant_diagonal(level, expected):
    g = TimeGrid.uniform(0, 1, 31)
    assert normalization_weight(GridOperator(g, g, level * np.ones((31, 31)))) == pytest.approx(expected, rel=1e-12)


def test_normalization_weight_rank_one():
    g = TimeGrid.uniform(0, 1, 201)
    phi = np.sqrt(2) * np.sin(2 * np.pi * g.points)
    assert normalization_weight(np.outer(phi, phi), g) == pytest.approx(1.0, abs=1e-3)


@pytest.fixture(scope="module")
def model():
    rng = np.random.default_rng(5)
    X1, _ = _rank_one(rng, N=80, noise=0.3)
    X2 = 0.5 * X1 + 0.2 * rng.standard_normal(X1.shape)
    X3, _ = _rank_one(rng, N=80, noise=0.3)
    return _dataset([X1, X2, 3.0 * X3]), None


def test_model_invariants(model):
    ds, _ = model
    m = estimate_model(ds, grid_size=31)
    for j in range(3):
        K = m.kernel(j, j, normalized=True)
        assert float(np.dot(m.grids[j].weights, np.diag(K))) == pytest.approx(1.0, abs=1e-10)
        assert np.array_equal(m.kernel(j, j), m.kernel(j, j).T)
        for k in range(3):
            assert np.array_equal(m.kernel(k, j), m.kernel(j, k).T)
    assert np.all(m.noise_vars >= 0) and np.all(m.norm_weights > 0)


def test_model_threads_and_roundtrip(model, tmp_path):
    ds, _ = model
    a = estimate_model(ds, grid_size=21, threads=1)
    b = estimate_model(ds, grid_size=21, threads=3)
    for key in a.covariances:
        assert np.array_equal(a.covariances[key], b.covariances[key])
    path = tmp_path / "m.json"
    a.save(path)
    c = ProcessModel.load(path)
    assert json.dumps(c.to_dict()) == json.dumps(a.to_dict())


def test_model_pairs_subset(model):
    ds, _ = model
    m = estimate_model(ds, grid_size=21, pairs=[(0, 1)])
    assert m.has(0, 1) and m.has(1, 0) and not m.has(0, 2)


@pytest.mark.parametrize("rule", ["gcv", "cv"])
def test_bandwidth_rules(model, rule):
    ds, _ = model
    m = estimate_model(ds, grid_size=21, mean_bandwidth=rule)
    assert m.bandwidths["cov"] == m.bandwidths["mean"]
