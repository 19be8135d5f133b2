import numpy as np
import pytest

from conftest import quadratic_icnn
from polarfactor.conjugate import ConjugateConfig
from polarfactor.icnn import IcnnConfig, IcnnParams, icnn_grad_input
from polarfactor.metrics import l2_uvp
from polarfactor.mlp import MlpConfig, MlpParams
from polarfactor.npf import (
    NpfModel,
    NpfTrainConfig,
    OptimConfig,
    PairedBatch,
    TrainingDivergence,
    init_model,
    m_theta,
    monge_loss,
    train_m_xi,
    train_potential,
    write_log,
)
from polarfactor.numcore import NumericsError, make_rng


def linear_net(M):
    d = M.shape[0]
    p = MlpParams(MlpConfig(d, d, []))
    p["W0"] = M
    return p


def test_paired_batch_validation():
    with pytest.raises(NumericsError):
        PairedBatch(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(NumericsError):
        PairedBatch(np.zeros((2, 2)), np.array([[0.0, np.inf], [0.0, 0.0]]))


def test_split_fractions():
    data = PairedBatch(np.arange(20.0).reshape(10, 2), np.zeros((10, 2)))
    a, b = data.split(0.85, make_rng(0))
    assert len(a) + len(b) == 10 and len(a) in (8, 9)
    assert not set(map(tuple, a.xs)) & set(map(tuple, b.xs))


def test_monge_loss_constants_cancel():
    cfg = IcnnConfig(dim=2, width=1, depth=1, hidden_quadratic=False, final_diag=False, final_rank=0)
    u = IcnnParams(cfg)
    u["cL"] = 3.0
    v = MlpParams(MlpConfig(2, 2, [3]))
    data = PairedBatch(make_rng(0).normal(size=(5, 2)), make_rng(1).normal(size=(5, 2)))
    loss, _ = monge_loss(u, v, data)
    assert loss == pytest.approx(0.0)


def test_monge_loss_identity_plugin():
    # F = Id, V = Id, u = 0.5 ||x||^2: loss = mean ||x||^2
    u = quadratic_icnn([0.5, 0.5])
    x = make_rng(2).normal(size=(6, 2))
    loss, _ = monge_loss(u, linear_net(np.eye(2)), PairedBatch(x, x))
    assert loss == pytest.approx(np.mean(np.sum(x**2, 1)))
    loss2, _ = monge_loss(u, linear_net(np.eye(2)), PairedBatch(np.vstack([x, x]), np.vstack([x, x])))
    assert loss2 == pytest.approx(loss)


def test_monge_gradient_matches_finite_differences():
    rng = make_rng(3)
    cfg = IcnnConfig(dim=2, width=3, depth=2)
    from polarfactor.icnn import init_icnn

    u = init_icnn(cfg, rng)
    v = linear_net(np.array([[0.9, 0.1], [0.0, 1.2]]))
    data = PairedBatch(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
    _, g = monge_loss(u, v, data)
    from polarfactor.numcore import finite_diff_grad, rel_error

    num = finite_diff_grad(lambda f: monge_loss(IcnnParams(cfg, f), v, data)[0], u.flat)
    assert rel_error(g, num, floor=1e-6) < 1e-5


def test_m_theta_examples():
    cs = ConjugateConfig(max_iterations=5000, gtol=1e-5)
    u = quadratic_icnn([0.5, 0.5])
    x = make_rng(4).normal(size=(5, 2))
    assert np.allclose(m_theta(u, None, 2 * x, cs).x, 2 * x, atol=1e-4)
    # F = grad u exactly: M is the identity
    u2 = quadratic_icnn([1.0, 2.0])
    assert np.allclose(m_theta(u2, None, icnn_grad_input(u2, x), cs).x, x, atol=1e-3)
    # constant field: every point maps to the same conjugate gradient
    out = m_theta(u2, None, np.tile([2.0, 4.0], (3, 1)), cs).x
    assert np.allclose(out, [1.0, 1.0], atol=1e-3)


def _small_cfg(steps, **kw):
    return NpfTrainConfig(
        steps=steps,
        batch_size=128,
        v_hidden=[32, 32],
        mxi_hidden=[32, 32],
        theta_opt=OptimConfig(1e-3, 0.5, 0.5, "cosine", 0.1),
        phi_opt=OptimConfig(1e-3, 0.9, 0.999, "cosine", 0.01),
        **kw,
    )


def test_zero_steps_returns_init():
    data = PairedBatch(make_rng(0).normal(size=(50, 2)), make_rng(1).normal(size=(50, 2)))
    icfg = IcnnConfig(dim=2, width=8)
    ref = init_model(icfg, data, _small_cfg(0), make_rng(5))
    model = train_potential(data, icfg, _small_cfg(0), ConjugateConfig(), make_rng(5))
    assert np.array_equal(model.u.flat, ref.u.flat)
    assert np.array_equal(model.v_phi.flat, ref.v_phi.flat)
    m_xi = train_m_xi(model, data, _small_cfg(0), ConjugateConfig(), make_rng(0), steps=0)
    assert m_xi is model.m_xi


def test_identity_field_learns_identity(tmp_path):
    rng = make_rng(0)
    x = rng.uniform(-1, 1, size=(4000, 2))
    data = PairedBatch(x, x.copy())
    model = train_potential(data, IcnnConfig(dim=2, width=16), _small_cfg(300, moment_init=False), ConjugateConfig(), rng)
    xt = make_rng(9).uniform(-1, 1, size=(500, 2))
    err = np.mean(np.linalg.norm(icnn_grad_input(model.u, xt) - xt, axis=1))
    assert err <= 0.05 * np.mean(np.linalg.norm(xt, axis=1))
    write_log(model.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,loss_monge,loss_dual,cs_iters,cs_converged" and len(lines) == 301


def test_convex_gradient_field_recovered():
    # F = diag(1, 2) x is itself a convex gradient, so it is its own Monge map
    rng = make_rng(1)
    x = rng.normal(size=(4000, 2))
    F = x * np.array([1.0, 2.0])
    model = train_potential(PairedBatch(x, F), IcnnConfig(dim=2, width=16), _small_cfg(300, moment_init=False), ConjugateConfig(), rng)
    xt = make_rng(8).normal(size=(1000, 2))
    assert l2_uvp(icnn_grad_input(model.u, xt), lambda z: z * np.array([1.0, 2.0]), xt, 5.0) <= 2.0


def test_m_xi_learns_identity_for_gradient_field():
    rng = make_rng(2)
    u = quadratic_icnn([0.5, 1.0])
    x = rng.uniform(-1, 1, size=(2000, 2))
    data = PairedBatch(x, icnn_grad_input(u, x))
    model = NpfModel(u, linear_net(np.eye(2)))
    cfg = _small_cfg(0, mxi_steps=400)
    cfg.mxi_opt = OptimConfig(3e-3, 0.9, 0.999, "cosine", 0.01)
    m_xi = train_m_xi(model, data, cfg, ConjugateConfig(max_iterations=2000, gtol=1e-4), rng)
    from polarfactor.mlp import mlp_forward

    xt = make_rng(3).uniform(-1, 1, size=(500, 2))
    assert np.mean(np.sum((mlp_forward(m_xi, xt) - xt) ** 2, axis=1)) <= 1e-2


def test_divergence_reports_last_good(monkeypatch):
    import polarfactor.npf as npf

    data = PairedBatch(make_rng(0).normal(size=(64, 2)), make_rng(1).normal(size=(64, 2)))
    calls = {"n": 0}
    real = npf.monge_loss

    def flaky(*a, **k):
        calls["n"] += 1
        loss, g = real(*a, **k)
        return (np.nan if calls["n"] > 150 else loss), g

    monkeypatch.setattr(npf, "monge_loss", flaky)
    with pytest.raises(TrainingDivergence) as err:
        train_potential(data, IcnnConfig(dim=2, width=4), _small_cfg(300), ConjugateConfig(), make_rng(0))
    u_good, v_good = err.value.last_good
    assert np.all(np.isfinite(u_good.flat)) and np.all(np.isfinite(v_good.flat))
