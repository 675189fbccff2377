import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from caidd.errors import ConfigError, ContractError, NumericError
from caidd.schedule import (
    forward_diffuse,
    make_cosine_schedule,
    posterior_step,
    respace,
    strided_timesteps,
    x0_estimate,
)


def closed_form_alpha_bar(t, T=1000, s=0.008):
    mpmath.mp.dps = 40
    f = lambda u: mpmath.cos((mpmath.mpf(u) / T + s) / (1 + s) * mpmath.pi / 2) ** 2
    return float(f(t) / f(0))


@pytest.fixture(scope="module")
def sched():
    return make_cosine_schedule()


def test_alpha_bar_matches_closed_form(sched):
    for t in (1, 10, 250, 500, 750, 900):
        assert abs(sched.alpha_bar[t - 1] - closed_form_alpha_bar(t)) < 1e-9


def test_alpha_bar_monotone_and_small_at_end(sched):
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[-1] < 1e-3
    assert np.all(sched.beta <= 0.999) and np.all(sched.beta > 0)


def test_alpha_bar_prev_consistency(sched):
    assert sched.alpha_bar_prev[0] == 1.0
    np.testing.assert_allclose(sched.alpha * sched.alpha_bar_prev, sched.alpha_bar, rtol=1e-12)


@pytest.mark.parametrize("kw", [{"T": 0}, {"s": -0.1}, {"beta_clip": 1.0}, {"beta_clip": 0.0}])
def test_invalid_schedule_config(kw):
    with pytest.raises(ConfigError):
        make_cosine_schedule(**kw)


def test_forward_diffuse_variance(sched):
    g = torch.Generator().manual_seed(0)
    x0 = torch.zeros(10_000, dtype=torch.float64)
    for t in (50, 500, 950):
        eps = torch.randn(10_000, generator=g, dtype=torch.float64)
        x_t = forward_diffuse(x0, t, eps, sched)
        assert abs(float(x_t.var()) / (1 - sched.alpha_bar[t - 1]) - 1) < 0.05


def test_timestep_out_of_range(sched):
    x = torch.zeros(3)
    with pytest.raises(IndexError):
        forward_diffuse(x, 0, x, sched)
    with pytest.raises(IndexError):
        forward_diffuse(x, 1001, x, sched)


def test_posterior_step_noise_contract(sched):
    x = torch.zeros(2, 3)
    with pytest.raises(ContractError):
        posterior_step(x, x, 1, sched, z=x)
    with pytest.raises(ContractError):
        posterior_step(x, x, 5, sched)


def test_posterior_step_t1_is_mean(sched):
    # at t = 1 the mean is (x - beta/sqrt(1-ab) eps)/sqrt(alpha) and with
    # alpha_bar_prev = 1 it coincides with the x0 estimate
    g = torch.Generator().manual_seed(1)
    x = torch.randn(4, dtype=torch.float64, generator=g)
    e = torch.randn(4, dtype=torch.float64, generator=g)
    out = posterior_step(x, e, 1, sched)
    torch.testing.assert_close(out, x0_estimate(x, e, 1, sched, clamp=False), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 999), st.integers(0, 2**31 - 1))
def test_x0_estimate_inverts_forward(t, seed):
    sched = make_cosine_schedule()
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(8, dtype=torch.float64, generator=g) * 2 - 1
    eps = torch.randn(8, dtype=torch.float64, generator=g)
    x_t = forward_diffuse(x0, t, eps, sched)
    torch.testing.assert_close(x0_estimate(x_t, eps, t, sched), x0, rtol=0, atol=1e-6)


def test_x0_estimate_unstable_end(sched):
    x = torch.zeros(3)
    with pytest.raises(NumericError):
        x0_estimate(x, x, sched.T, sched)


def test_strided_timesteps():
    ts = strided_timesteps(1000, 10)
    assert ts[0] == 1000 and ts[-1] == 1 and len(ts) == 10
    assert strided_timesteps(1000, 1000) == list(range(1000, 0, -1))
    with pytest.raises(ContractError):
        strided_timesteps(1000, 1001)


def test_respace_keeps_alpha_bar(sched):
    ts = strided_timesteps(1000, 50)
    r = respace(sched, ts)
    np.testing.assert_array_equal(r.alpha_bar, sched.alpha_bar[np.array(sorted(ts)) - 1])
    np.testing.assert_allclose(r.alpha * r.alpha_bar_prev, r.alpha_bar, rtol=1e-12)
    assert math.isclose(r.alpha_bar_prev[0], 1.0)
