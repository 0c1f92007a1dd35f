import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffner.errors import ConfigurationError, ValidationError
from diffner.schedule import (
    VarianceSchedule,
    ddim_step,
    ddim_update,
    forward_diffuse,
    make_schedule,
    make_tau,
)
from oracles import forward_chain

# 50-digit mpmath product of the linear betas (1e-4 .. 0.02, T = 1000)
LINEAR_ALPHA_BAR_1000 = 4.0358297653756833e-05


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [2, 10, 100, 1000, 1500, 2000])
def test_schedule_invariants(kind, T):
    s = make_schedule(kind, T)
    beta, alpha, ab = s.beta[1:], s.alpha[1:], s.alpha_bar
    assert len(beta) == T and len(ab) == T + 1
    assert np.all((beta > 0) & (beta < 1))
    assert np.all((alpha > 0) & (alpha < 1))
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[T] < 0.01
    running = 1.0
    for t in range(1, T + 1):
        running *= alpha[t - 1]
        assert abs(ab[t] - running) <= 1e-12 * running


def test_linear_alpha_bar_regression():
    s = make_schedule("linear", 1000)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[1000] == pytest.approx(LINEAR_ALPHA_BAR_1000, rel=1e-12)


def test_cosine_endpoints():
    s = make_schedule("cosine", 1000)
    assert s.beta.max() <= 0.999
    assert s.alpha_bar[1000] < 0.01


def test_schedule_errors():
    with pytest.raises(ConfigurationError):
        make_schedule("sigmoid", 10)
    with pytest.raises(ValidationError):
        make_schedule("linear", 0)


def test_schedule_is_immutable():
    s = make_schedule("cosine", 10)
    with pytest.raises(ValueError):
        s.alpha_bar[3] = 0.5


def test_forward_diffuse_cases():
    s = make_schedule("cosine", 100)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(5, 2))
    eps = rng.normal(size=(5, 2))
    t = 37
    ab = s.alpha_bar[t]
    np.testing.assert_allclose(forward_diffuse(x0, t, np.zeros_like(x0), s), math.sqrt(ab) * x0)
    np.testing.assert_allclose(forward_diffuse(np.zeros_like(x0), t, eps, s), math.sqrt(1 - ab) * eps)


def test_forward_diffuse_hand_value():
    # alpha_bar = 0.25: 0.5 * 0.8 + sqrt(0.75) * 1
    s = VarianceSchedule("linear", 1, np.array([0.0, 0.75]), np.array([1.0, 0.25]), np.array([1.0, 0.25]))
    out = forward_diffuse(np.array([[0.8, 0.8]]), 1, np.array([[1.0, 1.0]]), s)
    np.testing.assert_allclose(out, [[1.2660, 1.2660]], atol=1e-4)


def test_forward_diffuse_errors():
    s = make_schedule("linear", 10)
    with pytest.raises(ValidationError):
        forward_diffuse(np.zeros((2, 2)), 0, np.zeros((2, 2)), s)
    with pytest.raises(ValidationError):
        forward_diffuse(np.zeros((2, 2)), 11, np.zeros((2, 2)), s)
    with pytest.raises(ValidationError):
        forward_diffuse(np.zeros((2, 2)), 3, np.zeros((3, 2)), s)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_forward_diffuse_is_linear(t, seed, a, b):
    s = make_schedule("cosine", 500)
    rng = np.random.default_rng(seed)
    x1, x2, e1, e2 = rng.normal(size=(4, 6, 2))
    lhs = forward_diffuse(a * x1 + b * x2, t, a * e1 + b * e2, s)
    rhs = a * forward_diffuse(x1, t, e1, s) + b * forward_diffuse(x2, t, e2, s)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_ddim_identities():
    rng = np.random.default_rng(1)
    x, x0 = rng.normal(size=(2, 4, 2))
    np.testing.assert_allclose(ddim_update(x, x0, 0.3, 0.3), x, atol=1e-12)
    np.testing.assert_allclose(ddim_update(x, x0, 0.3, 1.0), x0, atol=1e-12)
    s = make_schedule("linear", 50)
    np.testing.assert_allclose(ddim_step(x, x0, 20, 0, s), x0, atol=1e-12)


def test_ddim_hand_value():
    # eps = (x - 0.5 x0) / sqrt(0.75); x_prev = 0.8 x0 + 0.6 eps
    out = ddim_update(np.array([[1.0, 0.5]]), np.array([[0.4, 0.2]]), 0.25, 0.64)
    np.testing.assert_allclose(out, [[0.8742562584220408, 0.4371281292110204]], rtol=1e-12)


def test_ddim_errors():
    s = make_schedule("linear", 50)
    x = np.zeros((1, 2))
    with pytest.raises(ValidationError):
        ddim_step(x, x, 10, 10, s)
    with pytest.raises(ValidationError):
        ddim_step(x, x, 10, 12, s)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("gamma", [1, 3, 5, 10])
def test_ddim_with_perfect_prediction_recovers_x0(kind, gamma):
    s = make_schedule(kind, 1000)
    rng = np.random.default_rng(gamma)
    x0 = rng.uniform(0, 1, size=(7, 2))
    x = rng.normal(size=(7, 2))
    tau = (0,) + make_tau(1000, gamma).tau
    for i in range(len(tau) - 1, 0, -1):
        x = ddim_step(x, x0, tau[i], tau[i - 1], s)
    np.testing.assert_allclose(x, x0, atol=1e-9)


@pytest.mark.parametrize(
    "T,gamma,expected",
    [
        (1000, 5, (200, 400, 600, 800, 1000)),
        (1000, 1, (1000,)),
        (10, 10, tuple(range(1, 11))),
    ],
)
def test_make_tau_examples(T, gamma, expected):
    assert make_tau(T, gamma).tau == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 3000).flatmap(lambda T: st.tuples(st.just(T), st.integers(1, T))))
def test_make_tau_shape(args):
    T, gamma = args
    tau = make_tau(T, gamma).tau
    assert len(tau) == gamma and tau[-1] == T and tau[0] >= 1
    diffs = np.diff((0,) + tau)
    assert diffs.min() >= 1
    assert diffs.max() - diffs.min() <= 1


def test_make_tau_errors():
    with pytest.raises(ValidationError):
        make_tau(10, 11)
    with pytest.raises(ValidationError):
        make_tau(10, 0)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("t", [1, 10, 250, 1000])
def test_chain_matches_closed_form(kind, t):
    sched = make_schedule(kind, 1000)
    x0 = np.array([-0.7, 0.4])
    n = 10_000
    chain = forward_chain(x0, t, sched, np.random.default_rng(t), n)
    closed = forward_diffuse(np.broadcast_to(x0, (n, 2)), t, np.random.default_rng(t + 1).standard_normal((n, 2)),
                             sched)
    ab = sched.alpha_bar[t]
    mean, var = math.sqrt(ab) * x0, 1.0 - ab
    mean_se, var_se = math.sqrt(var / n), var * math.sqrt(2.0 / (n - 1))
    for sample in (chain, closed):
        assert np.all(np.abs(sample.mean(0) - mean) <= 3 * mean_se)
        assert np.all(np.abs(sample.var(0, ddof=1) - var) <= 3 * var_se)
    # the two estimators against each other: difference of two independent means
    assert np.all(np.abs(chain.mean(0) - closed.mean(0)) <= 3 * math.sqrt(2) * mean_se)
