import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import quadratic_icnn
from polarfactor.bridge import (
    BridgeConfig,
    bridge_interpolate,
    drift_eval,
    init_drift,
    sde_sample,
    train_drift,
)
from polarfactor.conjugate import ConjugateConfig
from polarfactor.mlp import MlpConfig, MlpParams
from polarfactor.npf import PairedBatch
from polarfactor.numcore import NumericsError, make_rng


def constant_drift(x_hat):
    d = len(x_hat)
    p = MlpParams(MlpConfig(2 * d + 1, d, [4], "silu"))
    p["b1"] = np.asarray(x_hat, dtype=float)
    return p


def passthrough_drift(d):
    p = MlpParams(MlpConfig(2 * d, d, []))
    p["W0"] = np.hstack([np.zeros((d, d)), np.eye(d)])
    return p


def test_config_invariants():
    with pytest.raises(NumericsError):
        BridgeConfig(sigma=-0.1)
    with pytest.raises(NumericsError):
        BridgeConfig(n_steps=1)
    with pytest.raises(NumericsError):
        BridgeConfig(t_max=1.0)
    assert BridgeConfig(n_steps=100).end_time == pytest.approx(0.995)


def test_interpolate_endpoints_and_midpoint():
    rng = make_rng(0)
    y, x, z = rng.normal(size=(3, 4))
    assert np.array_equal(bridge_interpolate(y, x, 0.0, 0.7, z), y)
    assert np.array_equal(bridge_interpolate(y, x, 1.0, 0.7, z), x)
    e1 = np.eye(3)[0]
    assert np.allclose(bridge_interpolate(np.zeros(3), np.zeros(3), 0.5, 2.0, e1), e1)
    with pytest.raises(NumericsError):
        bridge_interpolate(y, x, 1.5, 0.1, z)


def test_interpolate_per_row_times():
    rng = make_rng(1)
    y, x, z = rng.normal(size=(3, 5, 2))
    t = rng.uniform(size=5)
    out = bridge_interpolate(y, x, t, 0.3, z)
    for i in range(5):
        assert np.allclose(out[i], bridge_interpolate(y[i], x[i], t[i], 0.3, z[i]))


def test_drift_net_shapes():
    psi = init_drift(3, BridgeConfig(hidden=[8, 8]), make_rng(0))
    assert psi.cfg.in_dim == 7 and psi.cfg.out_dim == 3 and psi.cfg.activation == "silu"
    assert drift_eval(psi, np.zeros((4, 3)), np.zeros((4, 3)), 0.5).shape == (4, 3)
    plain = init_drift(3, BridgeConfig(hidden=[8], time_input=False), make_rng(0))
    assert plain.cfg.in_dim == 6
    assert drift_eval(plain, np.zeros((4, 3)), np.zeros((4, 3)), 0.5).shape == (4, 3)


def test_time_input_is_used():
    psi = init_drift(2, BridgeConfig(hidden=[8]), make_rng(1))
    x0, xt = make_rng(2).normal(size=(2, 5, 2))
    per_row = drift_eval(psi, x0, xt, np.linspace(0, 1, 5))
    assert np.allclose(per_row[2], drift_eval(psi, x0[2:3], xt[2:3], 0.5)[0])
    assert not np.allclose(drift_eval(psi, x0, xt, 0.1), drift_eval(psi, x0, xt, 0.9))


def test_constant_drift_matches_analytic_solution():
    cfg = BridgeConfig(sigma=0.0, n_steps=100)
    y = np.array([0.0, 0.0])
    x_hat = np.array([0.6, 0.8])  # ||x_hat - y|| = 1
    out = sde_sample(constant_drift(x_hat), y, cfg, make_rng(0))
    t = cfg.end_time
    assert np.linalg.norm(out - ((1 - t) * y + t * x_hat)) <= 1e-3
    # the endpoint clip leaves a gap of (1 - t_max) ||x_hat - y|| to x_hat
    assert np.linalg.norm(out - x_hat) <= 1e-2


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 50))
def test_constant_drift_exact_for_any_grid(seed, S):
    rng = make_rng(seed)
    y, x_hat = rng.normal(size=(2, 3))
    cfg = BridgeConfig(sigma=0.0, n_steps=S)
    t = cfg.end_time
    out = sde_sample(constant_drift(x_hat), y, cfg, rng)
    assert np.allclose(out, (1 - t) * y + t * x_hat, atol=1e-9)


def test_box_clips_endpoint_prediction():
    cfg = BridgeConfig(sigma=0.0, n_steps=50)
    y = np.array([0.5, 0.5])
    out = sde_sample(constant_drift([5.0, -3.0]), y, cfg, make_rng(0), box=([0.0, 0.0], [1.0, 1.0]))
    t = cfg.end_time
    assert np.allclose(out, (1 - t) * y + t * np.array([1.0, 0.0]))
    # a box that contains the prediction changes nothing
    inside = sde_sample(constant_drift([0.6, 0.8]), y, cfg, make_rng(0), box=([0.0, 0.0], [1.0, 1.0]))
    assert np.array_equal(inside, sde_sample(constant_drift([0.6, 0.8]), y, cfg, make_rng(0)))


def test_passthrough_drift_is_fixed_point():
    y = make_rng(2).normal(size=(7, 3))
    out = sde_sample(passthrough_drift(3), y, BridgeConfig(sigma=0.0, n_steps=20), make_rng(0))
    assert np.allclose(out, y)


def test_same_seed_same_sample():
    psi = init_drift(2, BridgeConfig(hidden=[8]), make_rng(0))
    cfg = BridgeConfig(sigma=0.5, n_steps=30)
    y = np.ones((5, 2))
    a = sde_sample(psi, y, cfg, make_rng(11))
    b = sde_sample(psi, y, cfg, make_rng(11))
    c = sde_sample(psi, y, cfg, make_rng(12))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_reports_step():
    p = constant_drift([1e308, 1e308])
    with pytest.raises(NumericsError, match="step"):
        sde_sample(p, np.zeros(2), BridgeConfig(sigma=0.0, n_steps=10), make_rng(0))


def test_zero_training_steps_returns_initial_net():
    u = quadratic_icnn([0.5, 0.5])
    data = PairedBatch(np.zeros((4, 2)), np.zeros((4, 2)))
    psi = init_drift(2, BridgeConfig(hidden=[8]), make_rng(0))
    flat = psi.flat.copy()
    out, info = train_drift(u, None, data, BridgeConfig(hidden=[8]), ConjugateConfig(), make_rng(1), psi=psi, steps=0)
    assert out is psi and np.array_equal(out.flat, flat) and info["cs_failures"] == 0


def test_drift_regression_learns_injective_coupling():
    # y = x for u = 0.5||x||^2 and F = Id: the optimal drift target is x itself
    rng = make_rng(3)
    x = rng.uniform(-1, 1, size=(2000, 1))
    cfg = BridgeConfig(sigma=0.0, n_steps=20, hidden=[32, 32])
    psi, info = train_drift(quadratic_icnn([0.5]), None, PairedBatch(x, x), cfg, ConjugateConfig(), rng, steps=1500)
    assert info["cs_failures"] == 0 and info["loss"] < 1e-3
    xt = np.linspace(-0.9, 0.9, 7)[:, None]
    assert np.allclose(sde_sample(psi, xt, cfg, rng), xt, atol=0.05)

