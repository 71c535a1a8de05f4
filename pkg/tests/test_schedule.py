"""Noise schedule construction, the forward process, and the fusion window."""

import numpy as np
import pytest

from scenefuse import autodiff as ad
from scenefuse.schedule import (
    build_schedule,
    forward_marginal,
    forward_step,
    fusion_window,
    sample_fusion_timestep,
    schedule_from_spec,
)


def test_constant_schedule_running_product():
    s = build_schedule("constant", 3, 0.1)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.81, 0.729], atol=1e-15)


def test_linear_schedule_inclusive_endpoints():
    s = build_schedule("linear", 2, 0.1, 0.2)
    np.testing.assert_allclose(s.betas, [0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], atol=1e-15)


@pytest.mark.parametrize("kind", ["constant", "linear"])
def test_single_step_schedule(kind):
    s = build_schedule(kind, 1, 0.3, 0.3)
    np.testing.assert_allclose(s.alpha_bars, [0.7])


def test_schedule_validation():
    with pytest.raises(ValueError):
        build_schedule("constant", 0, 0.1)
    with pytest.raises(ValueError):
        build_schedule("linear", 5, 0.0, 0.1)
    with pytest.raises(ValueError):
        build_schedule("linear", 5, 0.2, 1.0)
    with pytest.raises(ValueError):
        build_schedule("linear", 5, 0.3, 0.2)
    with pytest.raises(ValueError):
        build_schedule("cosine", 5, 0.1, 0.2)


def test_alpha_bars_strictly_decreasing_in_unit_interval():
    rng = np.random.default_rng(0)
    for _ in range(20):
        start = float(rng.uniform(1e-5, 0.3))
        end = float(rng.uniform(start, 0.8))
        T = int(rng.integers(1, 200))
        s = build_schedule("linear", T, start, end)
        assert np.all(np.diff(s.alpha_bars) < 0) or T == 1
        assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
        assert s.alpha_bar(0) == 1.0
        # recurrence alpha_bar_t = alpha_bar_{t-1} * (1 - beta_t)
        for t in (1, T):
            assert s.alpha_bar(t) == pytest.approx(
                s.alpha_bar(t - 1) * (1 - s.beta(t)), rel=1e-12)


def test_spec_roundtrip_recomputes_alpha_bars():
    s = build_schedule("linear", 50, 1e-4, 0.09)
    s2 = schedule_from_spec(s.spec_dict())
    np.testing.assert_array_equal(s.alpha_bars, s2.alpha_bars)
    assert s2.kind == "linear" and s2.step_count == 50


def test_forward_marginal_special_cases():
    s = build_schedule("constant", 4, 0.1)
    z0 = np.array([1.0, -2.0, 0.5])
    zeros = np.zeros(3)
    np.testing.assert_allclose(
        forward_marginal(s, z0, 2, zeros), np.sqrt(0.81) * z0, atol=1e-15)
    eps = np.array([0.3, 0.1, -0.2])
    np.testing.assert_allclose(
        forward_marginal(s, zeros, 2, eps), np.sqrt(1 - 0.81) * eps, atol=1e-15)


def test_forward_marginal_hand_value():
    # alpha_bar = 0.25 at t=2 for constant beta = 0.5
    s = build_schedule("constant", 2, 0.5)
    assert s.alpha_bar(2) == pytest.approx(0.25)
    out = forward_marginal(s, np.array([2.0]), 2, np.array([1.0]))
    assert out[0] == pytest.approx(1.866025, abs=1e-6)


def test_forward_marginal_linear_in_inputs():
    s = build_schedule("linear", 10, 0.01, 0.2)
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=5)
    eps = rng.normal(size=5)
    for a in (0.0, -1.3, 2.5):
        np.testing.assert_allclose(
            forward_marginal(s, a * z0, 7, a * eps),
            a * forward_marginal(s, z0, 7, eps), atol=1e-12)


def test_forward_marginal_validation():
    s = build_schedule("constant", 3, 0.1)
    with pytest.raises(ValueError):
        forward_marginal(s, np.zeros(3), 0, np.zeros(3))
    with pytest.raises(ValueError):
        forward_marginal(s, np.zeros(3), 4, np.zeros(3))
    with pytest.raises(ValueError):
        forward_marginal(s, np.zeros(3), 1, np.zeros(4))


def test_forward_step_hand_value():
    s = build_schedule("constant", 2, 0.19)
    out = forward_step(s, np.array([1.0]), 1, np.array([0.0]))
    assert out[0] == pytest.approx(0.9, abs=1e-12)
    out = forward_step(s, np.zeros(1), 1, np.array([1.0]))
    assert out[0] == pytest.approx(np.sqrt(0.19), abs=1e-12)


def test_chain_matches_marginal_moments():
    """Monte-Carlo: composing forward steps matches the closed form."""
    s = build_schedule("linear", 30, 1e-3, 0.1)
    rng = np.random.default_rng(7)
    n = 4000
    z0 = np.array([1.5])
    t = 30
    z = np.full((n, 1), z0)
    for step in range(1, t + 1):
        z = forward_step(s, z, step, rng.standard_normal((n, 1)))
    mean, var = z.mean(), z.var()
    ab = s.alpha_bar(t)
    se_mean = np.sqrt(1 - ab) / np.sqrt(n)
    se_var = (1 - ab) * np.sqrt(2.0 / (n - 1))
    assert abs(mean - np.sqrt(ab) * z0[0]) < 3 * se_mean
    assert abs(var - (1 - ab)) < 3 * se_var


def test_forward_marginal_differentiable():
    s = build_schedule("constant", 5, 0.2)
    z0 = ad.Var(np.array([1.0, 2.0]))
    out = ad.vsum(forward_marginal(s, z0, 3, np.zeros(2)))
    ad.backward(out)
    np.testing.assert_allclose(z0.grad, np.sqrt(s.alpha_bar(3)) * np.ones(2))


def test_fusion_window_bounds():
    s100 = build_schedule("linear", 100, 1e-4, 0.05)
    assert fusion_window(s100) == (20, 80)
    s5 = build_schedule("constant", 5, 0.1)
    assert fusion_window(s5) == (1, 4)


def test_fusion_timestep_window_and_determinism():
    s = build_schedule("linear", 100, 1e-4, 0.05)
    rng = np.random.default_rng(3)
    draws = [sample_fusion_timestep(rng, s) for _ in range(2000)]
    assert min(draws) >= 20 and max(draws) <= 80
    a = [sample_fusion_timestep(np.random.default_rng(11), s) for _ in range(5)]
    b = [sample_fusion_timestep(np.random.default_rng(11), s) for _ in range(5)]
    assert a == b

    s10 = build_schedule("constant", 10, 0.1)
    draws = {sample_fusion_timestep(rng, s10) for _ in range(2000)}
    assert draws == set(range(2, 9))

    with pytest.raises(ValueError):
        sample_fusion_timestep(rng, build_schedule("constant", 1, 0.1))
