import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffnormal.schedule import (
    NoiseSchedule,
    eps_to_x0,
    forward_diffuse,
    make_linear_schedule,
    make_scaled_linear_schedule,
    x0_to_eps,
)


def schedule_from_alpha_bars(alpha_bars):
    """Hand-built schedule with prescribed cumulative products."""
    ab = np.asarray(alpha_bars, dtype=np.float64)
    alphas = ab / np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(len(ab), 0.0, 0.0, "linear", 1.0 - alphas, alphas, ab)


def test_single_step():
    s = make_linear_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alphas, [0.9])
    np.testing.assert_allclose(s.alpha_bars, [0.9])


def test_two_step_product():
    s = make_linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.betas, [0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=1e-15)


def test_default_schedule_decreasing_to_noise():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] < 1e-4
    np.testing.assert_allclose(s.alpha_bars[1:], s.alpha_bars[:-1] * s.alphas[1:], rtol=1e-14)


def test_scaled_linear():
    s = make_scaled_linear_schedule(1000)
    assert s.schedule_kind == "scaled-linear"
    np.testing.assert_allclose(np.sqrt(s.betas[[0, -1]]), np.sqrt([0.00085, 0.012]))
    assert np.all(np.diff(s.alpha_bars) < 0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 1e-4, 1.0)])
def test_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_tables_are_read_only():
    s = make_linear_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bars[0] = 0.5


def test_config_roundtrip():
    for s in (make_linear_schedule(50, 1e-3, 0.05), make_scaled_linear_schedule(20)):
        back = NoiseSchedule.from_config(s.to_config())
        assert back.T == s.T and back.schedule_kind == s.schedule_kind
        np.testing.assert_array_equal(back.alpha_bars, s.alpha_bars)
    assert "alpha" not in make_linear_schedule(5).to_config().replace("alpha_", "")


def test_config_missing_key():
    with pytest.raises(ValueError, match="beta_end"):
        NoiseSchedule.from_config("T = 10\nbeta_start = 0.001\n")


def test_corrupt_tables_rejected():
    with pytest.raises(ValueError):
        schedule_from_alpha_bars([0.5, 0.6])


def test_forward_diffuse_examples():
    s = make_linear_schedule(10)
    z = np.zeros((2, 2, 3))
    np.testing.assert_array_equal(forward_diffuse(z, 3, z, s), z)
    s = schedule_from_alpha_bars([0.25])
    np.testing.assert_allclose(forward_diffuse(np.array(1.0), 0, np.array(0.5), s), 0.5 + np.sqrt(0.75) * 0.5)
    np.testing.assert_allclose(forward_diffuse(np.array(1.0), 0, np.array(0.5), s), 0.93301, atol=1e-5)


def test_forward_diffuse_identity_limit():
    s = schedule_from_alpha_bars([1 - 1e-15])
    x0 = np.array([0.3, -1.2])
    np.testing.assert_allclose(forward_diffuse(x0, 0, np.zeros(2), s), x0, rtol=1e-14)


def test_forward_diffuse_errors():
    s = make_linear_schedule(10)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 0, np.zeros(4), s)
    with pytest.raises(IndexError):
        forward_diffuse(np.zeros(3), 10, np.zeros(3), s)
    with pytest.raises(IndexError):
        forward_diffuse(np.zeros(3), -1, np.zeros(3), s)


def test_eps_to_x0_examples():
    s = schedule_from_alpha_bars([0.25])
    v = np.array([0.7, -0.1])
    np.testing.assert_allclose(eps_to_x0(v, np.zeros(2), 0, s), 2 * v)
    s1 = schedule_from_alpha_bars([1 - 1e-16])
    np.testing.assert_allclose(eps_to_x0(v, np.ones(2), 0, s1), v, atol=1e-7)


def test_x0_to_eps_examples():
    s = schedule_from_alpha_bars([0.25])
    v = np.array([0.7, -0.1])
    np.testing.assert_allclose(x0_to_eps(v, v / 0.5, 0, s), 0.0, atol=1e-15)
    np.testing.assert_allclose(x0_to_eps(np.array(0.93301), np.array(1.0), 0, s), 0.5, atol=1e-5)


def test_roundtrips_random():
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        t = int(rng.integers(0, 1000))
        x0, eps, eps_hat = rng.standard_normal((3, 4))
        xt = forward_diffuse(x0, t, eps, s)
        np.testing.assert_allclose(eps_to_x0(xt, eps, t, s), x0, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(x0_to_eps(xt, eps_to_x0(xt, eps_hat, t, s), t, s), eps_hat, rtol=1e-9, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    t=st.integers(0, 999),
    x0=st.floats(-5, 5),
    eps=st.floats(-5, 5),
)
def test_roundtrip_property(t, x0, eps):
    s = make_linear_schedule(1000)
    xt = forward_diffuse(np.array(x0), t, np.array(eps), s)
    assert abs(eps_to_x0(xt, np.array(eps), t, s) - x0) <= 1e-9 * max(1.0, abs(x0))


def test_forward_marginal_statistics():
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(1)
    n = 100_000
    x0 = 0.8
    for t in (0, 100, 400, 700, 999):
        xt = forward_diffuse(np.full(n, x0), t, rng.standard_normal(n), s)
        ab = s.alpha_bars[t]
        var = 1 - ab
        assert abs(xt.mean() - np.sqrt(ab) * x0) < 3 * np.sqrt(var / n)
        # standard error of the sample variance of a Gaussian: var * sqrt(2 / (n - 1))
        assert abs(xt.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))
