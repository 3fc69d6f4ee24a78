import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgcca.errors import ExtrapolationError, IllPosedMetricError, IncompatibleGridError, InvalidGridError
from fgcca.grid import (
    GridFunction,
    GridOperator,
    Metric,
    TimeGrid,
    apply_operator,
    inner_product,
    metric_norm,
    solve_metric,
    trapezoid_weights,
)


@pytest.mark.parametrize(
    "points, expected",
    [
        ([0, 0.5, 1], [0.25, 0.5, 0.25]),
        ([0, 1], [0.5, 0.5]),
        ([0, 0.1, 0.4, 1], [0.05, 0.2, 0.45, 0.3]),
    ],
)
def test_trapezoid_weights(points, expected):
    np.testing.assert_allclose(trapezoid_weights(points), expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("points", [[0, 0], [1, 0.5, 2], [0.3], [0, np.nan, 1]])
def test_invalid_grid(points):
    with pytest.raises(InvalidGridError):
        TimeGrid.from_points(points)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=30))
def test_weights_sum_to_length(gaps):
    pts = np.concatenate([[0.0], np.cumsum(gaps)])
    w = trapezoid_weights(pts)
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(pts[-1] - pts[0], rel=1e-12)


def test_grid_is_immutable():
    g = TimeGrid.uniform(0, 1, 11)
    with pytest.raises(ValueError):
        g.points[0] = 5.0


def test_inner_products():
    g = TimeGrid.uniform(0, 1, 101)
    one = GridFunction.from_callable(g, np.ones_like)
    assert inner_product(one, one) == pytest.approx(1.0, abs=1e-14)
    s = GridFunction.from_callable(g, lambda t: np.sin(2 * np.pi * t))
    c = GridFunction.from_callable(g, lambda t: np.cos(2 * np.pi * t))
    assert abs(inner_product(s, c)) < 1e-6
    f = s.scaled(np.sqrt(2))
    assert inner_product(f, f) == pytest.approx(1.0, abs=1e-3)


def test_grid_mismatch():
    a = GridFunction(TimeGrid.uniform(0, 1, 5), np.ones(5))
    b = GridFunction(TimeGrid.uniform(0, 2, 5), np.ones(5))
    with pytest.raises(IncompatibleGridError):
        inner_product(a, b)
    K = GridOperator(b.grid, b.grid, np.eye(5))
    with pytest.raises(IncompatibleGridError):
        apply_operator(K, a)


def test_operator_action():
    g = TimeGrid.uniform(0, 1, 101)
    t = g.points
    u, v, h = np.sin(t), t ** 2, np.exp(t)
    K = GridOperator(g, g, np.outer(u, v))
    out = K(GridFunction(g, h))
    np.testing.assert_allclose(out.values, np.dot(g.weights * v, h) * u, rtol=1e-13)
    zero = GridOperator(g, g, np.zeros((101, 101)))(GridFunction(g, h))
    assert not np.any(zero.values)
    ones = GridOperator(g, g, np.ones((101, 101)))(GridFunction(g, t))
    np.testing.assert_allclose(ones.values, 0.5, atol=1e-4)


def test_operator_between_grids():
    a, b = TimeGrid.uniform(0, 1, 7), TimeGrid.uniform(0, 3, 4)
    K = GridOperator(a, b, np.arange(28.0).reshape(7, 4))
    assert K(GridFunction(b, np.ones(4))).grid == a
    assert K.T.kernel.shape == (4, 7)


def test_solve_metric_identity_and_scalar():
    g = TimeGrid.uniform(0, 1, 21)
    rhs = GridFunction(g, np.cos(g.points))
    np.testing.assert_array_equal(solve_metric(Metric(g), rhs).values, rhs.values)
    half = solve_metric(lambda f: f.scaled(2.0), rhs)
    np.testing.assert_allclose(half.values, rhs.values / 2, rtol=1e-13)


def test_solve_metric_rank_one_residual():
    g = TimeGrid.uniform(0, 1, 41)
    u = np.sin(np.pi * g.points)
    M = Metric(g, 0.5, np.outer(u, u))
    rhs = GridFunction(g, g.points ** 2 - 0.3)
    x = solve_metric(M, rhs)
    np.testing.assert_allclose(M(x).values, rhs.values, atol=1e-10)
    # same answer through the generic callable path
    y = solve_metric(lambda f: M(f), rhs)
    np.testing.assert_allclose(y.values, x.values, atol=1e-10)
    assert metric_norm(M, rhs.values) ** 2 == pytest.approx(inner_product(rhs, x), rel=1e-12)


def test_ill_posed_metric_names_process():
    g = TimeGrid.uniform(0, 1, 11)
    with pytest.raises(IllPosedMetricError) as err:
        Metric(g, 0.5, -5 * np.eye(11) / g.weights[None, :], process=2)
    assert err.value.process == 2


def test_interpolation():
    g = TimeGrid.uniform(0, 1, 11)
    f = GridFunction(g, 3 * g.points + 1)
    np.testing.assert_allclose(f([0.25, 0.95]), [1.75, 3.85])
    with pytest.raises(ExtrapolationError):
        f([1.5])


def test_roundtrip():
    g = TimeGrid.from_points([0, 0.2, 0.9, 1.3])
    assert TimeGrid.from_dict(g.to_dict()) == g
    assert hash(TimeGrid.from_dict(g.to_dict())) == hash(g)
