import json
import os

import numpy as np
import pytest

import training
from config_manager import CompressCfg, NetworkCfg, TrainConfig
from errors import ConfigError, NumericalError, ShapeError, TrainingDivergedError
from rng_streams import derive_rng
from training import (AblationCell, AblationPlan, AdamState, EarlyStopper, TrainRecord, add_awgn, expand_matrix,
                      load_ablation, mse_loss, optimizer_step, prepare_network, reference_lambda, run_ablation,
                      sample_reflectivity, synthesize_batch, synthesize_pair, train_network, validation_set)
from unrolled_net import THRESHOLDS, network_forward


def _quick_cfg(**kw) -> TrainConfig:
    base = dict(max_epochs=2, iters_per_epoch=2, batch_size=2, validation_set_size=3, learning_rate=1e-3,
                snr_db=20.0, seed=7)
    base.update(kw)
    return TrainConfig(**base)


# ---------- data ----------
def test_forced_single_scatterer():
    cfg = TrainConfig(scatterers_min=1, scatterers_max=1)
    x = sample_reflectivity(np.random.default_rng(0), 1, 1, cfg)
    assert x.values.shape == (1, 1) and x.values[0, 0] != 0.0


def test_scatterer_statistics():
    cfg = TrainConfig()
    rng = derive_rng(0, "data")
    n = 10_000
    counts = np.zeros(11, dtype=int)
    amps = []
    for _ in range(n):
        v = sample_reflectivity(rng, 8, 8, cfg).vector
        nz = v[v != 0.0]
        counts[nz.size] += 1
        amps.append(nz)
    p = 1.0 / 6.0
    sigma = np.sqrt(n * p * (1 - p))
    assert counts[:5].sum() == 0
    for c in counts[5:]:
        assert abs(c - n * p) <= 3 * sigma
    assert abs(np.concatenate(amps).mean() - 1250.0) <= 0.01 * 1250.0


def test_sampling_is_deterministic():
    cfg = TrainConfig()
    a = sample_reflectivity(derive_rng(3, "data"), 8, 8, cfg)
    b = sample_reflectivity(derive_rng(3, "data"), 8, 8, cfg)
    np.testing.assert_array_equal(a.values, b.values)


def test_too_many_scatterers():
    with pytest.raises(ConfigError):
        sample_reflectivity(np.random.default_rng(0), 2, 2, TrainConfig())


def test_noise_variance():
    y = np.ones(1_000_000)
    noisy = add_awgn(y, 20.0, derive_rng(0, "noise"))
    assert abs((noisy - y).var() - 0.01) <= 0.01 * 0.01


def test_noise_hits_requested_snr():
    y = derive_rng(1, "data").standard_normal(20_000)
    noise = add_awgn(y, 5.0, derive_rng(1, "noise")) - y
    snr = 10 * np.log10(np.mean(y ** 2) / np.mean(noise ** 2))
    assert abs(snr - 5.0) <= 0.2


def test_noise_edge_cases():
    y = np.arange(5.0)
    np.testing.assert_array_equal(add_awgn(y, None, np.random.default_rng(0)), y)
    np.testing.assert_array_equal(add_awgn(y, 10.0, derive_rng(2, "noise")), add_awgn(y, 10.0, derive_rng(2, "noise")))
    with pytest.raises(NumericalError):
        add_awgn(np.zeros(4), 10.0, np.random.default_rng(0))


def test_noiseless_pair_is_exact(model):
    x, y = synthesize_pair(derive_rng(0, "data"), model, TrainConfig(snr_db=None))
    np.testing.assert_array_equal(y, model.forward_flat(x))


def test_batch_rows_have_independent_noise(model):
    cfg = TrainConfig(snr_db=10.0)
    X, Y = synthesize_batch(derive_rng(0, "data"), derive_rng(0, "noise"), model, cfg, 3)
    assert X.shape == (3, model.setup.num_pixels) and Y.shape == (3, model.setup.num_data)
    assert not np.allclose(Y, model.forward_flat(X))


def test_mse_loss(rng):
    x = rng.standard_normal(10)
    assert mse_loss(x, x) == 0.0
    assert mse_loss(x + 1.0, x) == pytest.approx(1.0)
    y = rng.standard_normal(10)
    assert mse_loss(x, y) == pytest.approx(sum((a - b) ** 2 for a, b in zip(x, y)) / 10)
    with pytest.raises(ShapeError):
        mse_loss(x, y[:5])


# ---------- optimizer ----------
def test_adam_zero_gradient_is_a_no_op():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    optimizer_step(params, {"w": np.zeros(2)}, state, TrainConfig())
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert not state.m["w"].any() and not state.v["w"].any()


def test_adam_first_step_has_learning_rate_magnitude():
    cfg = TrainConfig(learning_rate=1e-3)
    params = {"w": np.array([0.0])}
    optimizer_step(params, {"w": np.array([4.2])}, AdamState(), cfg)
    assert params["w"][0] == pytest.approx(-1e-3, rel=1e-6)


def test_thresholds_step_in_amplitude_units():
    cfg = TrainConfig(learning_rate=1e-3, amplitude_mean=1250.0)
    assert cfg.threshold_lr == pytest.approx(1.25)
    params = {"w": np.array([0.0]), THRESHOLDS: np.array([10.0])}
    optimizer_step(params, {"w": np.array([3.0]), THRESHOLDS: np.array([3.0])}, AdamState(), cfg)
    assert params["w"][0] == pytest.approx(-1e-3, rel=1e-6)
    assert params[THRESHOLDS][0] == pytest.approx(10.0 - 1.25, rel=1e-6)

    explicit = TrainConfig(learning_rate=1e-3, threshold_learning_rate=0.5)
    params = {THRESHOLDS: np.array([10.0])}
    optimizer_step(params, {THRESHOLDS: np.array([-2.0])}, AdamState(), explicit)
    assert params[THRESHOLDS][0] == pytest.approx(10.5, rel=1e-6)
    with pytest.raises(ConfigError):
        TrainConfig(threshold_learning_rate=0.0)


def test_adam_descends_a_quadratic():
    cfg = TrainConfig(learning_rate=0.1)
    params = {"w": np.array([0.0])}
    state = AdamState()
    losses = []
    for _ in range(100):
        optimizer_step(params, {"w": 2.0 * (params["w"] - 30.0)}, state, cfg)
        losses.append(float((params["w"][0] - 30.0) ** 2))
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_adam_clamps_thresholds():
    params = {THRESHOLDS: np.array([1e-4, 1.0])}
    optimizer_step(params, {THRESHOLDS: np.array([5.0, 0.0])}, AdamState(), TrainConfig(learning_rate=0.1))
    assert params[THRESHOLDS][0] == 0.0
    assert params[THRESHOLDS][1] == 1.0


# ---------- early stopping ----------
def test_signed_stopper_counts_improvements_too():
    s = EarlyStopper(1e-6, 3, "signed")
    results = [s.update(v) for v in (10.0, 9.0, 8.0, 7.0)]
    assert results == [False, False, False, True]


def test_absolute_stopper_needs_a_plateau():
    s = EarlyStopper(1e-6, 3, "absolute")
    assert not any(s.update(v) for v in (10.0, 9.0, 8.0, 7.0))
    assert [s.update(7.0) for _ in range(3)] == [False, False, True]


def test_stopper_resets_on_increase():
    s = EarlyStopper(1e-6, 2, "signed")
    assert [s.update(v) for v in (5.0, 5.0, 6.0, 6.0, 6.0)] == [False, False, False, False, True]


# ---------- training loop ----------
def _net(model, cfg, **kw):
    ncfg = NetworkCfg(**{"arch": "cbc", "blocks": 2, "init": "omp", "basis": 4, **kw})
    return prepare_network(model, ncfg, CompressCfg(), cfg, init_seed=1)


def test_zero_epochs_returns_initial_net(model):
    cfg = _quick_cfg(max_epochs=0)
    net = _net(model, cfg)
    trained, rec = train_network(net, model, cfg)
    assert rec.epochs == 0 and rec.initial_val_loss > 0.0
    for k in net.params:
        np.testing.assert_array_equal(trained.params[k], net.params[k])


def test_training_record_and_best_parameters(model):
    cfg = _quick_cfg(max_epochs=3)
    net = _net(model, cfg)
    lines = []
    trained, rec = train_network(net, model, cfg, model_id="tiny", log=lines.append)
    assert rec.model_id == "tiny"
    assert rec.epochs == len(rec.train_loss) == len(rec.wall_ms) <= 3
    assert rec.stop_reason in ("early", "max_epochs")
    assert lines
    X_val, Y_val = validation_set(model, cfg)
    got = mse_loss(network_forward(trained, Y_val)[0], X_val)
    assert got == pytest.approx(rec.best_val_loss, rel=1e-12)
    # the input net is left untouched
    assert net.params is not trained.params


def test_training_is_reproducible(model):
    cfg = _quick_cfg()
    a = train_network(_net(model, cfg), model, cfg)[1]
    b = train_network(_net(model, cfg), model, cfg)[1]
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss


def test_divergence_carries_the_partial_record(model, monkeypatch):
    cfg = _quick_cfg()
    net = _net(model, cfg)

    def broken(net, y, x):
        return float("nan"), {}

    monkeypatch.setattr(training, "loss_and_grad", broken)
    with pytest.raises(TrainingDivergedError) as info:
        train_network(net, model, cfg, model_id="bad")
    assert info.value.epoch == 1 and info.value.iteration == 1
    assert info.value.record.stop_reason == "diverged"


def test_setup_mismatch(model, desk_model):
    cfg = _quick_cfg()
    with pytest.raises(ShapeError):
        train_network(_net(model, cfg), desk_model, cfg)


def test_reference_lambda_is_positive(model):
    assert reference_lambda(model, _quick_cfg(), 0.1) > 0.0


def test_prepare_network_variants(model):
    cfg = _quick_cfg()
    omp = _net(model, cfg)
    assert omp.provenance["method"] == "omp" and omp.provenance["basis"] == 4
    frozen = _net(model, cfg, train_forward=False)
    assert not frozen.trainable["forward"]
    rand = _net(model, cfg, init="kaiming")
    assert rand.provenance["init"] == "kaiming"
    with pytest.raises(ConfigError, match="only applies to cbc"):
        _net(model, cfg, arch="bc", init="svd")
    with pytest.raises(ConfigError):
        _net(model, cfg, arch="alista", init="omp")


def test_analytic_bc_and_alista_start_from_the_full_kernels(model):
    cfg = _quick_cfg()
    for arch in ("bc", "alista"):
        net = prepare_network(model, NetworkCfg(arch=arch, blocks=2), CompressCfg(), cfg, init_seed=1)
        assert net.provenance["source"] == "model"
        for d, s in enumerate(model.slices):
            np.testing.assert_array_equal(net.params[f"shared.fwd.slice{d}.weights"], s.weights)
            np.testing.assert_array_equal(net.params[f"shared.bwd.slice{d}.weights"], s.weights)


def test_analytic_cbc_compresses_with_the_configured_method(model):
    cfg = _quick_cfg()
    net = prepare_network(model, NetworkCfg(blocks=2, basis=4), CompressCfg(method="svd"), cfg, init_seed=1)
    assert net.provenance["source"] == "compressed"
    assert net.provenance["method"] == "svd" and net.provenance["basis"] == 4


def test_frozen_forward_path_stays_bit_identical(model, monkeypatch):
    cfg = _quick_cfg(max_epochs=3, learning_rate=1e-2, early_stop_mode="absolute")
    net = _net(model, cfg, train_forward=False)
    # every epoch "improves", so the returned parameters are the last ones
    falling = iter(range(100, 0, -1))
    monkeypatch.setattr(training, "_val_loss", lambda _net, _x, _y: float(next(falling)))
    trained, rec = train_network(net, model, cfg)
    assert rec.best_epoch == 3
    fwd = [k for k in net.params if ".fwd." in k]
    assert fwd
    for k in fwd:
        np.testing.assert_array_equal(trained.params[k], net.params[k])
    moved = [k for k in net.params if not np.array_equal(trained.params[k], net.params[k])]
    assert THRESHOLDS in moved and any(".bwd." in k for k in moved)


def test_all_groups_frozen_stops_after_patience(model):
    cfg = _quick_cfg(max_epochs=20, early_stop_patience=5, early_stop_mode="signed")
    net = _net(model, cfg, train_forward=False, train_transposed=False, train_threshold=False)
    trained, rec = train_network(net, model, cfg)
    # a constant validation loss counts from the second epoch on
    assert rec.epochs == 6 and rec.stop_reason == "early"
    assert len(set(rec.val_loss)) == 1
    for k in net.params:
        np.testing.assert_array_equal(trained.params[k], net.params[k])


# ---------- records ----------
def test_record_files(tmp_path):
    rec = TrainRecord("m", [1.0, 0.5], [0.9, 0.4], [10.0, 11.0], "max_epochs", 1.2, 2, {"lr": 1e-3})
    rec.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,wall_ms"
    assert len(lines) == 3
    rec.to_json(tmp_path / "r.json")
    back = TrainRecord.from_json(tmp_path / "r.json")
    assert back == rec
    assert json.loads((tmp_path / "r.json").read_text())["best_val_loss"] == 0.4
    rec.to_csv(tmp_path / "plain.csv", timings=False)
    assert (tmp_path / "plain.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss"


def test_rerun_curves_are_byte_identical_without_timings(model, tmp_path):
    cfg = _quick_cfg()
    for name in ("a", "b"):
        _, rec = train_network(_net(model, cfg), model, cfg, model_id="same")
        rec.to_csv(tmp_path / f"{name}.csv", timings=False)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert rec.config["threshold_lr"] == cfg.threshold_lr


# ---------- ablation ----------
def test_shipped_ablation_plan():
    plan = load_ablation(os.path.join(os.path.dirname(__file__), os.pardir, "ablation.json"))
    assert plan.arch == "cbc" and plan.basis == 32
    names = [c.name for c in plan.cells]
    assert names[0] == "baseline" and len(names) == 8
    assert {c.init for c in plan.cells} == {"omp", "svd", "xavier", "kaiming", "orthogonal"}


def test_ablation_matrix_and_errors(tmp_path):
    p = tmp_path / "plan.json"
    p.write_text(json.dumps({"matrix": {"blocks": [5, 20], "init": ["omp", "xavier"]}}))
    plan = load_ablation(str(p))
    assert len(plan.cells) == 4
    assert len(expand_matrix([1, 2], ["omp"], [False, True])) == 4
    p.write_text(json.dumps({"cells": [], "extra": 1}))
    with pytest.raises(ConfigError):
        load_ablation(str(p))
    p.write_text(json.dumps({"cells": [{"name": "a", "depth": 3}]}))
    with pytest.raises(ConfigError):
        load_ablation(str(p))
    p.write_text(json.dumps({"cells": []}))
    with pytest.raises(ConfigError):
        load_ablation(str(p))


def test_run_ablation_shares_data_and_varies_init(model):
    cfg = _quick_cfg(max_epochs=1, iters_per_epoch=1)
    plan = AblationPlan("t", "cbc", 4, [AblationCell("a", 2, "omp"), AblationCell("b", 2, "xavier", True)])
    res = run_ablation(plan, model, NetworkCfg(), CompressCfg(), cfg, log=lambda _m: None)
    assert [r.model_id for r in res.records] == ["a", "b"]
    assert res.records[0].config["init_seed"] != res.records[1].config["init_seed"]
    assert [row["cell"] for row in res.rows] == ["a", "b"]
    assert res.rows[1]["forward_frozen"] is True
