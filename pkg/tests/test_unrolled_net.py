import numpy as np
import pytest

from compress import compress_model
from conftest import small_setup
from errors import ConfigError, ShapeError
from evaluation import count_params
from ista import default_lambda, ista_solve
from slice_model import build_slice_kernels, estimate_lipschitz
from unrolled_net import (ARCHS, THRESHOLDS, UnrolledNet, _path_forward, _path_transpose, build_network,
                          count_trainable, gradient_check, group_of, loss_and_grad, network_backward,
                          network_forward)


@pytest.fixture(scope="module")
def tiny_model():
    # N_s = 16
    return build_slice_kernels(small_setup(num_elements=2, grid_nz=4, grid_nx=4, num_samples=16))


def _sparse_pairs(model, n, rng, amplitude=1.0):
    X = np.zeros((n, model.setup.num_pixels))
    for row in X:
        idx = rng.choice(row.size, size=3, replace=False)
        row[idx] = amplitude * (1.0 + 0.3 * rng.standard_normal(3))
    return X, model.forward_flat(X)


def _analytic(arch, blocks, model, y, **kw):
    source = compress_model(model, "omp", 4) if arch == "cbc" else model
    L = estimate_lipschitz(source.operator()).value
    lam = default_lambda(y, source.operator())
    return build_network(arch, blocks, source, lam, L, **kw), source, lam, L


# ---------- forward ----------
@pytest.mark.parametrize("arch", ["bc", "cbc", "alista"])
def test_analytic_blocks_equal_ista_iterations(arch, model, rng):
    _, Y = _sparse_pairs(model, 1, rng, amplitude=1250.0)
    y = Y[0]
    net, source, lam, L = _analytic(arch, 10, model, y)
    x_net, _ = network_forward(net, y)
    x_ista, _ = ista_solve(y, source.operator(), lam, L, max_iters=10)
    assert np.max(np.abs(x_net - x_ista)) < 1e-12 * max(1.0, np.max(np.abs(x_ista)))


def test_mlp_analytic_blocks_equal_ista_iterations(tiny_model, rng):
    _, Y = _sparse_pairs(tiny_model, 1, rng)
    net, source, lam, L = _analytic("mlp", 5, tiny_model, Y[0])
    x_net, _ = network_forward(net, Y[0])
    x_ista, _ = ista_solve(Y[0], source.operator(), lam, L, max_iters=5)
    np.testing.assert_allclose(x_net, x_ista, rtol=1e-9, atol=1e-12)


def test_batched_forward_equals_rows(model, rng):
    _, Y = _sparse_pairs(model, 3, rng)
    net, *_ = _analytic("cbc", 3, model, Y[0])
    batched, _ = network_forward(net, Y)
    for i in range(3):
        np.testing.assert_allclose(batched[i], network_forward(net, Y[i])[0], rtol=1e-12, atol=1e-14)


def test_trivial_outputs(model, rng):
    _, Y = _sparse_pairs(model, 1, rng)
    net, *_ = _analytic("bc", 4, model, Y[0])
    assert not network_forward(net, np.zeros(model.setup.num_data))[0].any()
    empty, *_ = _analytic("bc", 0, model, Y[0])
    assert not network_forward(empty, Y[0])[0].any()
    with pytest.raises(ShapeError):
        network_forward(net, np.zeros(5))


def test_block_outputs_are_shrunk(model, rng):
    _, Y = _sparse_pairs(model, 2, rng)
    net, *_ = _analytic("cbc", 4, model, Y[0])
    _, trace = network_forward(net, Y, keep_trace=True)
    for k, bt in enumerate(trace.blocks):
        out = trace.blocks[k + 1].x_in if k + 1 < net.num_blocks else trace.x_hat
        assert np.all((out == 0.0) | (np.abs(bt.u) > net.thresholds[k]))
        np.testing.assert_array_equal(out == 0.0, np.abs(bt.u) <= net.thresholds[k])


@pytest.mark.parametrize("arch", ["bc", "cbc"])
def test_network_paths_are_adjoint(arch, model, rng):
    _, Y = _sparse_pairs(model, 1, rng)
    net, *_ = _analytic(arch, 1, model, Y[0])
    for lay in net.layout:
        d = lay.slice_offset
        fwd = net.slice_params(0, "fwd", d)
        bwd = net.slice_params(0, "bwd", d)
        for _ in range(50):
            x = rng.standard_normal(model.setup.num_pixels)
            e = rng.standard_normal((model.setup.num_samples, lay.output_len))
            fx = _path_forward(fwd, lay, x)
            lhs, rhs = np.sum(fx * e), np.dot(x, _path_transpose(bwd, lay, e))
            assert abs(lhs - rhs) < 1e-12 * np.linalg.norm(fx) * np.linalg.norm(e)


# ---------- construction ----------
def test_build_rules(model, rng):
    _, Y = _sparse_pairs(model, 1, rng)
    with pytest.raises(ConfigError, match="compressed"):
        build_network("cbc", 2, model, 1.0, 1.0)
    with pytest.raises(ConfigError):
        build_network("alista", 2, model, 1.0, 1.0, init="xavier")
    with pytest.raises(ConfigError):
        build_network("lista-t", 2, model, 1.0, 1.0)
    with pytest.raises(ConfigError):
        build_network("bc", 2, model, -1.0, 1.0)
    net = build_network("alista", 3, model, 2.0, 4.0, trainable={"forward": True})
    assert not net.trainable["forward"] and not net.trainable["transposed"]
    np.testing.assert_allclose(net.thresholds, 0.5)
    assert net.step == pytest.approx(0.25)


def test_transposed_weights_are_separate_copies(model):
    net = build_network("bc", 2, model, 1.0, 10.0)
    fwd = net.params["shared.fwd.slice0.weights"]
    bwd = net.params["shared.bwd.slice0.weights"]
    np.testing.assert_array_equal(fwd, bwd)
    assert not np.shares_memory(fwd, bwd)


def test_unshared_blocks_have_own_params(model):
    net = build_network("bc", 3, model, 1.0, 10.0, shared=False)
    assert {k.split(".")[0] for k in net.params if k != THRESHOLDS} == {"block0", "block1", "block2"}


def test_random_init_is_seeded(model):
    a = build_network("cbc", 2, model, 1.0, 10.0, init="xavier", basis=4, seed=3)
    b = build_network("cbc", 2, model, 1.0, 10.0, init="xavier", basis=4, seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert a.params["shared.fwd.slice0.basis"].shape[0] == 4


def test_group_of():
    assert group_of("thresholds") == "threshold"
    assert group_of("shared.fwd.slice1.basis") == "forward"
    assert group_of("block2.bwd.slice0.weights") == "transposed"
    assert group_of("shared.w2") == "transposed"
    with pytest.raises(KeyError):
        group_of("bias")


def test_negative_thresholds_rejected(setup):
    with pytest.raises(ConfigError):
        UnrolledNet("alista", 1, setup, {THRESHOLDS: np.array([-1.0])},
                    trainable={"forward": False, "transposed": False, "threshold": True})


# ---------- backward ----------
@pytest.mark.parametrize("arch", ARCHS)
def test_gradient_check_all_architectures(arch, tiny_model, rng):
    X, Y = _sparse_pairs(tiny_model, 2, rng)
    net, *_ = _analytic(arch, 2, tiny_model, Y[0])
    res = gradient_check(net, Y, X, h=1e-6, tol=1e-5)
    assert res.checked > 0
    assert res.passed, f"{arch}: deviation {res.max_deviation:.3e} at {res.worst_key}"


def test_gradient_check_unshared_random_init(tiny_model, rng):
    X, Y = _sparse_pairs(tiny_model, 2, rng)
    net = build_network("cbc", 2, tiny_model, 0.05, 50.0, init="orthogonal", basis=3, shared=False, seed=1)
    res = gradient_check(net, Y, X)
    assert res.passed, f"deviation {res.max_deviation:.3e} at {res.worst_key}"


def test_gradient_check_on_sampled_entries(model, rng):
    X, Y = _sparse_pairs(model, 1, rng)
    net, *_ = _analytic("cbc", 2, model, Y[0])
    res = gradient_check(net, Y, X, max_entries=24, seed=4)
    assert res.passed, f"deviation {res.max_deviation:.3e} at {res.worst_key}"


def test_gradient_check_catches_corrupted_gradient(tiny_model, rng):
    X, Y = _sparse_pairs(tiny_model, 2, rng)
    net, *_ = _analytic("bc", 2, tiny_model, Y[0])
    _, grads = loss_and_grad(net, Y, X)
    bad = {k: 1.5 * v + 1e-3 for k, v in grads.items()}
    res = gradient_check(net, Y, X, grads=bad)
    assert not res.passed
    assert res.max_deviation > 1e-2


def test_gradient_check_vacuous_when_all_frozen(tiny_model):
    net = build_network("bc", 2, tiny_model, 0.1, 10.0,
                        trainable={"forward": False, "transposed": False, "threshold": False})
    res = gradient_check(net, np.zeros((1, tiny_model.setup.num_data)), np.zeros((1, 16)))
    assert res.vacuous and res.passed and res.checked == 0


def test_gradients_vanish_at_the_optimum(tiny_model, rng):
    _, Y = _sparse_pairs(tiny_model, 2, rng)
    net, *_ = _analytic("cbc", 2, tiny_model, Y[0])
    x_hat, trace = network_forward(net, Y, keep_trace=True)
    for g in network_backward(net, trace, x_hat).values():
        assert not np.any(g)


def test_dead_network_has_zero_gradients(tiny_model, rng):
    _, Y = _sparse_pairs(tiny_model, 2, rng)
    net = build_network("bc", 2, tiny_model, 1e9, 1.0)
    loss, grads = loss_and_grad(net, Y, np.zeros((2, 16)))
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.values())


def test_backward_needs_a_trace(tiny_model):
    net = build_network("bc", 1, tiny_model, 0.1, 10.0)
    with pytest.raises(ValueError):
        network_backward(net, None, np.zeros(16))


@pytest.mark.parametrize("arch", ARCHS)
def test_frozen_groups_get_no_gradient(arch, tiny_model, rng):
    X, Y = _sparse_pairs(tiny_model, 2, rng)
    flags = {"forward": False, "transposed": True, "threshold": True}
    net, *_ = _analytic(arch, 2, tiny_model, Y[0], trainable=flags)
    _, grads = loss_and_grad(net, Y, X)
    assert all(group_of(k) != "forward" for k in grads)
    # parameter count equals the number of scalars that receive gradients
    assert count_params(net) == sum(g.size for g in grads.values()) == count_trainable(net)


# ---------- counts ----------
def test_alista_has_one_parameter_per_block(model):
    net = build_network("alista", 10, model, 1.0, 10.0)
    assert count_params(net) == 10


def test_cbc_parameter_counts_scale_with_basis(model):
    counts = {}
    for m in (16, 8, 4):
        cm = compress_model(model, "svd", m)
        counts[m] = count_params(build_network("cbc", 10, cm, 1.0, 10.0)) - 10
    assert counts[16] == 2 * counts[8] == 4 * counts[4]


def test_everything_frozen_counts_zero(model):
    net = build_network("bc", 2, model, 1.0, 10.0,
                        trainable={"forward": False, "transposed": False, "threshold": False})
    assert count_params(net) == 0
