import numpy as np
import pytest

from ista import default_lambda, ista_preset, ista_solve, ista_step, lasso_objective, soft_threshold
from errors import ShapeError
from slice_model import estimate_lipschitz


def test_soft_threshold_values():
    v = np.array([-3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0])
    np.testing.assert_array_equal(soft_threshold(v, 1.0), [-2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0])
    np.testing.assert_array_equal(soft_threshold(v, 0.0), v)
    with pytest.raises(ValueError):
        soft_threshold(v, -0.1)


def test_soft_threshold_gives_exact_zeros(rng):
    v = rng.standard_normal(1000)
    out = soft_threshold(v, 0.7)
    assert np.all((out == 0.0) == (np.abs(v) <= 0.7))


def test_lasso_objective():
    A = np.eye(2)
    assert lasso_objective(np.array([1.0, 0.0]), np.array([0.0, 0.0]), A, 2.0) == pytest.approx(2.5)
    vals = lasso_objective(np.zeros((3, 2)), np.ones((3, 2)), A, 1.0)
    np.testing.assert_allclose(vals, [1.0, 1.0, 1.0])


def test_default_lambda(rng):
    A = rng.standard_normal((6, 4))
    y = rng.standard_normal(6)
    assert default_lambda(y, A) == pytest.approx(0.1 * np.max(np.abs(A.T @ y)))
    Y = rng.standard_normal((3, 6))
    np.testing.assert_allclose(default_lambda(Y, A, 0.5), 0.5 * np.max(np.abs(Y @ A), axis=1))


def test_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        ista_step(np.zeros(3), np.zeros(6), np.ones((6, 4)), 0.1, 1.0)


def test_identity_operator_converges_to_soft_threshold():
    y = np.array([3.0, -0.2, 1.5])
    x, trace = ista_solve(y, np.eye(3), lam=1.0, L=1.0, max_iters=5)
    np.testing.assert_allclose(x, soft_threshold(y, 1.0))
    assert len(trace) == 6


def test_zero_data_stops_immediately(model):
    x, trace = ista_solve(np.zeros(model.setup.num_data), model.operator(), lam=0.0, L=1.0, max_iters=50)
    assert not x.any()
    assert trace[0] == 0.0 and len(trace) == 2


def test_objective_non_increasing_on_desk_instances(desk_model, rng):
    op = desk_model.operator()
    L = estimate_lipschitz(op).value
    X = np.zeros((20, desk_model.setup.num_pixels))
    for row in X:
        idx = rng.choice(row.size, size=int(rng.integers(5, 11)), replace=False)
        row[idx] = rng.normal(1250.0, np.sqrt(250.0), size=idx.size)
    Y = desk_model.forward_flat(X)
    lam = default_lambda(Y, op)
    x = np.zeros_like(X)
    prev = lasso_objective(x, Y, op, lam)
    for _ in range(500):
        x = ista_step(x, Y, op, lam, L)
        cur = lasso_objective(x, Y, op, lam)
        assert np.all(cur <= prev * (1.0 + 1e-12))
        prev = cur


def test_stop_tolerance_cuts_iterations(model, rng):
    y = model.forward_flat(rng.standard_normal(model.setup.num_pixels))
    _, full = ista_solve(y, model.operator(), max_iters=100)
    _, short = ista_solve(y, model.operator(), max_iters=100, stop_tol=1e-2)
    assert len(short) < len(full)


def test_presets():
    assert ista_preset("ista-200") == 200
    assert ista_preset("ISTA-500") == 500
    with pytest.raises(ValueError):
        ista_preset("ista-7")
