import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarfactor.numcore import (
    ACTIVATIONS,
    Adam,
    FlatParams,
    NumericsError,
    Schedule,
    activation,
    finite_diff_grad,
    make_rng,
    rel_error,
    split_rng,
)


def test_same_seed_same_stream():
    assert np.array_equal(make_rng(7).normal(size=5), make_rng(7).normal(size=5))
    assert not np.array_equal(make_rng(7).normal(size=5), make_rng(8).normal(size=5))
    assert np.array_equal(make_rng([7, 1]).normal(size=3), make_rng([7, 1]).normal(size=3))


def test_split_streams_differ():
    a, b = split_rng(make_rng(0), 2)
    assert not np.array_equal(a.normal(size=4), b.normal(size=4))


def test_flat_params_views_share_memory():
    p = FlatParams([("a", (2, 3)), ("b", ()), ("c", (4,))])
    assert p.size == 11
    p["a"] = 1.0
    p["b"] = 5.0
    assert p.flat[:6].sum() == 6.0 and p.flat[6] == 5.0
    p["a"][0, 0] = 9.0
    assert p.flat[0] == 9.0
    assert "c" in p and "d" not in p
    with pytest.raises(NumericsError):
        FlatParams([("a", (2,))], np.zeros(3))


def test_cosine_schedule_endpoints():
    s = Schedule("cosine", 1e-3, 0.1, 100)
    assert s(0) == pytest.approx(1e-3)
    assert s(100) == pytest.approx(1e-4)
    assert s(50) == pytest.approx(1e-3 * (0.9 * 0.5 + 0.1))
    assert s(1000) == pytest.approx(1e-4)
    assert Schedule("constant", 0.5)(123) == 0.5


def test_adam_first_step_moves_by_lr():
    # bias correction makes the first step lr * sign(g)
    opt = Adam(Schedule("constant", 0.1))
    out = opt.step(np.array([1.0, -2.0]), np.array([3.0, -0.5]))
    assert np.allclose(out, [0.9, -1.9])


def test_adam_minimizes_quadratic():
    opt = Adam(Schedule("constant", 0.05))
    x = np.array([3.0, -4.0])
    for _ in range(2000):
        x = opt.step(x, 2 * x)
    assert np.linalg.norm(x) < 1e-2


def test_adam_rejects_bad_gradients():
    opt = Adam()
    with pytest.raises(NumericsError):
        opt.step(np.zeros(2), np.zeros(3))
    with pytest.raises(NumericsError):
        opt.step(np.zeros(2), np.array([np.nan, 0.0]))


def test_finite_diff_on_polynomial():
    g = finite_diff_grad(lambda x: x[0] ** 3 + 2 * x[0] * x[1], np.array([1.0, 2.0]))
    assert np.allclose(g, [3 + 4, 2], atol=1e-8)


def test_finite_diff_names_bad_component():
    with pytest.raises(NumericsError, match="component 1"):
        finite_diff_grad(lambda x: x[0] + (math.sqrt(x[1]) if x[1] >= 0 else math.nan), np.array([1.0, 0.0]))


@pytest.mark.parametrize("name", sorted(ACTIVATIONS))
def test_activation_derivatives(name):
    f, fp = activation(name)
    x = np.linspace(-3, 3, 61) + 0.013  # keep clear of the relu kink
    num = (f(x + 1e-6) - f(x - 1e-6)) / 2e-6
    assert rel_error(fp(x), num) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50))
def test_convex_activations_are_nondecreasing(t):
    for name in ("elu", "softplus", "relu"):
        f, fp = activation(name)
        assert fp(np.array([t]))[0] >= 0
        assert f(np.array([t + 0.1]))[0] >= f(np.array([t]))[0]
