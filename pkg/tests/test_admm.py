import numpy as np
import pytest

from mspquant.admm import (
    LOG_COLUMNS,
    TrainConfig,
    admm_update,
    augmented_loss,
    calibrate_activations,
    feasibility_gap,
    hard_project,
    train,
    train_float,
)
from mspquant.assignment import project_rows
from mspquant.core import mlp, reshape_to_gemm
from mspquant.data import Dataset, train_test
from mspquant.errors import DivergenceError, IncompatibleShapeError, ValidationError
from mspquant.qmodel import SchemeConfig
from mspquant.quantizers import AlphaPolicy, QuantScheme, build_levels


def gap_trend_ok(gaps, slack=1.5, blocks=4):
    """Over the last quarter of epochs, the max gap of each block is at most
    ``slack`` times the max of the previous block."""
    w = np.asarray(gaps)[len(gaps) * 3 // 4:]
    peaks = [b.max() for b in np.array_split(w, blocks)]
    return all(b <= slack * a for a, b in zip(peaks, peaks[1:])), peaks


def test_admm_scalar_example():
    cfg = SchemeConfig()
    Z, U, alpha = admm_update(np.array([[0.30]]), np.zeros((1, 1)), np.array([[0.05]]), np.array(["f"]), cfg, np.array([1.0]))
    # 0.35 * 7 = 2.45, so the nearest 4-bit level is 2/7 (not 3/7)
    assert Z[0, 0] == 2 / 7
    assert U[0, 0] == pytest.approx(0.30 - 2 / 7 + 0.05, abs=1e-15)
    assert round(U[0, 0], 4) == 0.0643


def test_admm_fixed_point(rng):
    cfg = SchemeConfig()
    lv = build_levels(QuantScheme.fixed(4))
    W = lv.levels[rng.integers(0, len(lv), size=(4, 6))]
    W[:, 0] = 1.0
    tags = np.array(["f"] * 4)
    Z, U, alpha = admm_update(W, np.zeros_like(W), np.zeros_like(W), tags, cfg, refit=AlphaPolicy("max_abs"))
    assert np.array_equal(Z, W) and not U.any()
    assert np.array_equal(alpha, np.ones(4))


def test_dual_identity_with_frozen_w(rng):
    cfg = SchemeConfig()
    W = rng.normal(size=(5, 7))
    tags = np.array(list("sff8s"))
    Z, U = np.zeros_like(W), np.zeros_like(W)
    for _ in range(6):
        U_prev = U
        Z, U, _ = admm_update(W, Z, U, tags, cfg, refit=AlphaPolicy("least_squares"))
        assert np.array_equal(U - U_prev, (W - Z + U_prev) - U_prev)
        np.testing.assert_allclose(U - U_prev, W - Z, rtol=0, atol=1e-15)


def test_augmented_loss_examples():
    loss, g = augmented_loss(0.0, np.array([1.0]), np.array([0.0]), np.array([0.0]), 2.0)
    assert loss == 1.0 and g.tolist() == [2.0]
    W = np.ones((2, 2))
    assert augmented_loss(0.5, W, W, np.zeros_like(W), 3.0)[0] == 0.5


def test_calibrate_activations_percentile(moons):
    tr, _ = moons
    net = mlp([2, 8, 2], 0)
    act = calibrate_activations(net, tr.samples[:32], 4, 99.9)
    assert act.a_max[0] == pytest.approx(np.percentile(tr.samples[:32], 99.9))
    assert set(act.a_max) == {0, 2}


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(schedule="linear")
    c = TrainConfig(epochs=8, lr=1.0, schedule="step")
    assert [c.lr_at(e) for e in (0, 4, 6)] == [1.0, pytest.approx(0.1), pytest.approx(0.01)]
    assert TrainConfig(epochs=10, lr=1.0).lr_at(5) == pytest.approx(0.5)


def test_moons_run_log_and_gap(moons_run):
    base, res, cfg = moons_run
    assert len(res.log) == cfg.epochs
    assert set(res.log[0]) == set(LOG_COLUMNS)
    assert res.final()["feasibility_gap"] < 1e-3
    ok, peaks = gap_trend_ok([r["feasibility_gap"] for r in res.log])
    assert ok, peaks


def test_hard_projected_weights_on_level_sets(moons_run):
    _, res, cfg = moons_run
    model = res.model
    for i, ql in model.layers.items():
        W = model.weight_matrix(i)
        for r, tag in enumerate(ql.tags):
            unit = W[r] / ql.alpha[r]
            assert np.all(np.isin(np.round(unit, 12), np.round(cfg.schemes.levels(tag).levels, 12)))
        # codes reproduce the stored weights exactly
        assert np.array_equal(ql.dequantized(), W)
    hp = hard_project(res.net, res.state, cfg.schemes)
    for i in model.layers:
        assert np.array_equal(reshape_to_gemm(hp.layers[i]), model.weight_matrix(i))


@pytest.mark.parametrize("seed", [1, 2])
def test_gap_trend_other_seeds(seed):
    tr, te = train_test("moons", 1000, 500, seed)
    cfg = TrainConfig(epochs=150, seed=seed)
    base = train_float(mlp([2, 16, 16, 2], seed), tr, cfg)
    res = train(base.net, tr, cfg)
    gaps = [r["feasibility_gap"] for r in res.log]
    assert gaps[-1] < 1e-3
    ok, peaks = gap_trend_ok(gaps)
    assert ok, peaks


def test_training_is_deterministic(moons):
    tr, te = moons
    cfg = TrainConfig(epochs=6, seed=3)
    a = train(mlp([2, 8, 2], 3), tr, cfg)
    b = train(mlp([2, 8, 2], 3), tr, cfg)
    for i in a.model.layers:
        assert np.array_equal(a.model.layers[i].codes, b.model.layers[i].codes)
        assert np.array_equal(a.model.layers[i].alpha, b.model.layers[i].alpha)
    assert repr(a.log) == repr(b.log)


def test_zero_rho_equals_float_training(moons):
    tr, _ = moons
    cfg = TrainConfig(epochs=5, seed=4, rho=0.0)
    net = mlp([2, 8, 2], 4)
    q = train(net, tr, cfg)
    f = train_float(net, tr, cfg, act=q.act)
    for i in net.quantizable_indices():
        assert np.array_equal(q.net.layers[i].weight, f.net.layers[i].weight)
        assert np.array_equal(q.net.layers[i].bias, f.net.layers[i].bias)
    assert all(r["penalty"] == 0.0 for r in q.log)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard(moons):
    tr, _ = moons
    bad = Dataset(np.full_like(tr.samples[:64], 1e300), tr.labels[:64], "train", tr.num_classes)
    with pytest.raises(DivergenceError):
        train_float(mlp([2, 8, 2], 0), bad, TrainConfig(epochs=2, lr=1e3))


def test_incompatible_data(moons):
    tr, _ = moons
    with pytest.raises(IncompatibleShapeError):
        train_float(mlp([3, 4, 2], 0), tr, TrainConfig(epochs=1))


def test_uniform_and_reassign_options(moons):
    tr, _ = moons
    res = train(mlp([2, 8, 2], 5), tr, TrainConfig(epochs=3, seed=5, uniform_tag="p"))
    assert all(set(q.tags.tolist()) == {"p"} for q in res.model.layers.values())
    res = train(mlp([2, 8, 2], 5), tr, TrainConfig(epochs=3, seed=5, reassign_each_update=True))
    for i, q in res.model.layers.items():
        W = res.model.weight_matrix(i)
        assert feasibility_gap(W, q.tags, q.alpha, q.config) == 0.0
        assert np.array_equal(project_rows(W, q.tags, q.alpha, q.config), q.codes)
