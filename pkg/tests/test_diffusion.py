import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icdt import diffusion as D
from icdt import tensor as tc
from icdt.diffusion import ScheduleError
from icdt.tensor import Tensor

FULL = D.linear_beta_schedule(1000, 1e-4, 2e-2)


# -- schedule ---------------------------------------------------------------

def test_full_endpoints():
    assert FULL.betas[1] == pytest.approx(1e-4, abs=1e-15)
    assert FULL.betas[1000] == pytest.approx(2e-2, abs=1e-15)


def test_linear_midpoint():
    # exact rational oracle: 1e-4 + 499 * (2e-2 - 1e-4) / 999 = 0.010040040...
    from fractions import Fraction

    exact = Fraction(1, 10**4) + 499 * (Fraction(2, 100) - Fraction(1, 10**4)) / 999
    assert float(exact) == pytest.approx(0.01004004004004004, abs=1e-17)
    assert FULL.betas[500] == pytest.approx(float(exact), abs=1e-15)


def test_single_step_schedule():
    s = D.linear_beta_schedule(1, 0.3, 0.3)
    assert s.T == 1
    np.testing.assert_array_equal(s.betas[1:], [0.3])
    assert np.isfinite(s.log_posterior_vars_clipped[1])


@pytest.mark.parametrize("args", [(0, 1e-4, 2e-2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ScheduleError):
        D.linear_beta_schedule(*args)


@given(st.integers(2, 400), st.floats(1e-5, 0.05), st.floats(0.0, 0.3))
def test_schedule_invariants(T, start, span):
    s = D.linear_beta_schedule(T, start, min(start + span, 0.5))
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(np.diff(s.betas[1:]) >= 0)
    bt = s.posterior_vars[1:]
    assert np.all(bt >= 0) and np.all(bt <= s.betas[1:] + 1e-18)
    expect = (1 - s.alpha_bars[:-1]) / (1 - s.alpha_bars[1:]) * s.betas[1:]
    np.testing.assert_allclose(bt, expect, rtol=1e-12)


def test_timestep_range_checked():
    with pytest.raises(ScheduleError):
        D.q_sample(np.zeros(2), 0, np.zeros(2), FULL)
    with pytest.raises(ScheduleError):
        D.q_sample(np.zeros(2), 1001, np.zeros(2), FULL)


# -- forward process --------------------------------------------------------

def test_q_sample_noiseless(rng):
    x0 = rng.standard_normal(5)
    np.testing.assert_allclose(D.q_sample(x0, 300, np.zeros(5), FULL), math.sqrt(FULL.alpha_bars[300]) * x0)


def test_q_sample_pure_noise(rng):
    e = rng.standard_normal(5)
    np.testing.assert_allclose(D.q_sample(np.zeros(5), 300, e, FULL), math.sqrt(1 - FULL.alpha_bars[300]) * e)


def test_q_sample_batched_t(rng):
    x0, e = rng.standard_normal((3, 2, 2, 1)), rng.standard_normal((3, 2, 2, 1))
    t = np.array([1, 500, 1000])
    out = D.q_sample(x0, t, e, FULL)
    for i in range(3):
        np.testing.assert_allclose(out[i], D.q_sample(x0[i], int(t[i]), e[i], FULL))


def test_marginal_matches_composed_kernels():
    rng = np.random.default_rng(0)
    n, T = 100_000, 1000
    ab = FULL.alpha_bars[T]
    direct = D.q_sample(np.ones(n), T, rng.standard_normal(n), FULL)
    x = np.ones(n)
    for t in range(1, T + 1):
        x = D.q_step(x, t, rng.standard_normal(n), FULL)
    se = math.sqrt((1 - ab) / n)
    for sample in (direct, x):
        assert abs(sample.mean() - math.sqrt(ab)) < 3 * se
        assert abs(sample.var() / (1 - ab) - 1) < 0.05


# -- posterior ---------------------------------------------------------------

def test_posterior_t1_collapses_to_x0(rng):
    x0 = rng.standard_normal(4)
    x1 = math.sqrt(FULL.alphas[1]) * x0
    post = D.posterior_mean_variance(x0, x1, 1, FULL)
    assert post.variance == 0.0
    np.testing.assert_allclose(post.mean, x0, rtol=1e-12)


def test_posterior_zero_inputs():
    np.testing.assert_array_equal(D.posterior_mean_variance(np.zeros(3), np.zeros(3), 7, FULL).mean, 0.0)


def bayes_grid(s, t, x0, xt):
    """Moments of q(x_{t-1} | x_t, x_0) by dense numerical integration."""
    grid = np.linspace(-8, 8, 400_001)
    ab_prev = s.alpha_bars[t - 1]
    log_prior = -0.5 * (grid - math.sqrt(ab_prev) * x0) ** 2 / (1 - ab_prev)
    log_lik = -0.5 * (xt - math.sqrt(1 - s.betas[t]) * grid) ** 2 / s.betas[t]
    w = np.exp(log_prior + log_lik - np.max(log_prior + log_lik))
    w /= w.sum()
    mean = float((w * grid).sum())
    return mean, float((w * (grid - mean) ** 2).sum())


@pytest.mark.parametrize("x0,xt", [(0.7, -0.3), (-1.2, 0.4), (0.0, 1.5)])
def test_posterior_matches_grid_bayes(x0, xt):
    s = D.linear_beta_schedule(10, 1e-4, 2e-2)
    mean, var = bayes_grid(s, 5, x0, xt)
    post = D.posterior_mean_variance(np.array(x0), np.array(xt), 5, s)
    assert abs(float(post.mean) - mean) < 1e-6
    assert abs(float(post.variance) - var) < 1e-6


# -- eps parameterisation ------------------------------------------------------

def test_x0_round_trip(rng):
    x0, e = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    xt = D.q_sample(x0, 420, e, FULL)
    np.testing.assert_allclose(D.predict_x0_from_eps(xt, 420, e, FULL), x0, atol=1e-5)


def test_x0_from_zero_eps(rng):
    xt = rng.standard_normal(6)
    np.testing.assert_allclose(D.predict_x0_from_eps(xt, 9, np.zeros(6), FULL), xt / math.sqrt(FULL.alpha_bars[9]))


def test_x0_round_trip_all_t_float32():
    rng = np.random.default_rng(3)
    worst = 0.0
    for t in range(1, 1001):
        x0 = rng.standard_normal(16).astype(np.float32)
        e = rng.standard_normal(16).astype(np.float32)
        xt = D.q_sample(x0, t, e, FULL).astype(np.float32)
        worst = max(worst, float(np.abs(D.predict_x0_from_eps(xt, t, e, FULL) - x0).max()))
    assert worst < 1e-4


@given(st.integers(1, 1000), st.integers(0, 2**31))
def test_mu_equals_posterior_of_implied_x0(t, seed):
    rng = np.random.default_rng(seed)
    xt, e = rng.standard_normal(8), rng.standard_normal(8)
    implied = D.predict_x0_from_eps(xt, t, e, FULL)
    np.testing.assert_allclose(
        D.mu_from_eps(xt, t, e, FULL), D.posterior_mean_variance(implied, xt, t, FULL).mean, atol=1e-5
    )


def test_mu_zero():
    np.testing.assert_array_equal(D.mu_from_eps(np.zeros(3), 50, np.zeros(3), FULL), 0.0)


def test_mu_at_t1_recovers_x0(rng):
    x0, e = rng.standard_normal(5), rng.standard_normal(5)
    x1 = D.q_sample(x0, 1, e, FULL)
    np.testing.assert_allclose(D.mu_from_eps(x1, 1, e, FULL), x0, atol=1e-12)


# -- learned variance ------------------------------------------------------------

def test_sigma_endpoints():
    v = np.zeros(3)
    np.testing.assert_allclose(D.sigma_from_v(v + 1, 40, FULL), math.log(FULL.betas[40]))
    np.testing.assert_allclose(D.sigma_from_v(v, 40, FULL), math.log(FULL.posterior_vars[40]))
    np.testing.assert_allclose(D.sigma_from_v(v, 1, FULL), math.log(FULL.posterior_vars[2]))


def test_sigma_midpoint():
    # beta_1 = 0.02 / 1.02 makes the posterior variance at t=2 exactly half of beta_2 = 0.02
    s = D.NoiseSchedule(np.array([0.02 / 1.02, 0.02]))
    assert s.posterior_vars[2] == pytest.approx(1e-2, rel=1e-12)
    out = D.sigma_from_v(np.array(0.5), 2, s)
    assert float(out) == pytest.approx((math.log(2e-2) + math.log(1e-2)) / 2, rel=1e-12)


# -- KL and VLB ------------------------------------------------------------------

def test_kl_identical_is_zero():
    assert D.gaussian_kl(0.3, -1.0, 0.3, -1.0) == 0.0


def test_kl_unit_shift():
    assert D.gaussian_kl(1.0, 0.0, 0.0, 0.0) == pytest.approx(0.5)


@pytest.mark.parametrize("m1,s1,m2,s2", [(0.3, 0.8, -0.4, 1.3), (1.0, 0.5, 0.8, 0.45), (-2.0, 2.0, 0.0, 1.0)])
def test_kl_monte_carlo(m1, s1, m2, s2):
    rng = np.random.default_rng(11)
    x = m1 + s1 * rng.standard_normal(1_000_000)
    logp = -0.5 * ((x - m1) / s1) ** 2 - math.log(s1)
    logq = -0.5 * ((x - m2) / s2) ** 2 - math.log(s2)
    mc = float(np.mean(logp - logq))
    exact = D.gaussian_kl(m1, 2 * math.log(s1), m2, 2 * math.log(s2))
    assert abs(exact - mc) / exact < 0.01


@given(st.floats(-5, 5), st.floats(-4, 4), st.floats(-5, 5), st.floats(-4, 4))
def test_kl_nonnegative(m1, l1, m2, l2):
    assert D.gaussian_kl(m1, l1, m2, l2) >= -1e-9


def test_vlb_zero_for_perfect_prediction(rng):
    x0, e = rng.standard_normal(6), rng.standard_normal(6)
    xt = D.q_sample(x0, 30, e, FULL)
    assert abs(D.vlb_term((e, np.zeros(6)), x0, xt, 30, FULL)) < 1e-10


def test_l0_at_mean_with_unit_variance(rng):
    # unit variance at t=1: pick v so that v·log β_1 + (1 - v)·log β̃_1(clipped) = 0
    s = FULL
    lb, lp = math.log(s.betas[1]), s.log_posterior_vars_clipped[1]
    v = np.full(4, -lp / (lb - lp))
    x0, e = rng.standard_normal(4), rng.standard_normal(4)
    x1 = D.q_sample(x0, 1, e, s)
    assert D.vlb_term((e, v), x0, x1, 1, s) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-9)


def vlb_dense(eps, v, x0, xt, t, s):
    """Independent re-derivation straight from the closed forms."""
    a, b, ab = s.alphas[t], s.betas[t], s.alpha_bars[t]
    ab_prev = s.alpha_bars[t - 1]
    mu = (xt - b / math.sqrt(1 - ab) * eps) / math.sqrt(a)
    post_var = (1 - ab_prev) / (1 - ab) * b
    log_post = math.log(post_var) if t > 1 else math.log((1 - s.alpha_bars[1]) / (1 - s.alpha_bars[2]) * s.betas[2])
    logvar = v * math.log(b) + (1 - v) * log_post
    if t == 1:
        return float(np.mean(0.5 * (math.log(2 * math.pi) + logvar + (x0 - mu) ** 2 / np.exp(logvar))))
    mt = math.sqrt(ab_prev) * b / (1 - ab) * x0 + math.sqrt(a) * (1 - ab_prev) / (1 - ab) * xt
    var_p = np.exp(logvar)
    kl = np.log(np.sqrt(var_p) / math.sqrt(post_var)) + (post_var + (mt - mu) ** 2) / (2 * var_p) - 0.5
    return float(np.mean(kl))


@pytest.mark.parametrize("t", [1, 2, 17, 400, 1000])
def test_vlb_matches_dense_formula(t, rng):
    x0, e, eps_hat = rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(5)
    v = rng.uniform(-0.2, 1.2, 5)
    xt = D.q_sample(x0, t, e, FULL)
    assert abs(D.vlb_term((eps_hat, v), x0, xt, t, FULL) - vlb_dense(eps_hat, v, x0, xt, t, FULL)) < 1e-6


def test_vlb_tightens_with_longer_chain():
    """Perfect denoiser on one pixel: L_T + sum L_{t-1} + L_0 shrinks as T grows."""
    x0 = np.array([0.6])

    def total_vlb(T):
        s = D.linear_beta_schedule(T, 1e-4, 2e-2)
        rng = np.random.default_rng(0)
        prior = D.gaussian_kl(math.sqrt(s.alpha_bars[T]) * x0, math.log(1 - s.alpha_bars[T]), 0.0, 0.0)
        terms = 0.0
        for t in range(1, T + 1):
            e = rng.standard_normal(1)
            xt = D.q_sample(x0, t, e, s)
            terms += D.vlb_term((e, np.zeros(1)), x0, xt, t, s)
        return float(np.sum(prior)) + terms

    assert total_vlb(100) < total_vlb(10)


# -- simple and hybrid losses ---------------------------------------------------------

def test_l_simple_examples(rng):
    a = rng.standard_normal(10)
    assert D.l_simple(a, a) == 0.0
    assert D.l_simple(np.zeros(4), np.ones(4)) == 1.0
    b = rng.standard_normal(10)
    assert abs(D.l_simple(a, b) - sum((x - y) ** 2 for x, y in zip(a, b)) / 10) < 1e-7


def test_hybrid_lambda_zero_is_simple(rng):
    x0, e, eh, v = (rng.standard_normal(6) for _ in range(4))
    xt = D.q_sample(x0, 5, e, FULL)
    total, simple, _ = D.hybrid_loss(e, (eh, v), x0, xt, 5, FULL, lam=0.0)
    assert total == simple


def test_hybrid_weighting(monkeypatch):
    monkeypatch.setattr(D, "l_simple", lambda a, b: 1.0)
    monkeypatch.setattr(D, "vlb_term", lambda *a, **k: 2.0)
    total, _, _ = D.hybrid_loss(None, (None, None), None, None, 3, FULL)
    assert total == pytest.approx(1.002, abs=1e-15)


def _branch_grads(lam, rng):
    x0, e = rng.standard_normal((2, 4, 4, 3)), rng.standard_normal((2, 4, 4, 3))
    t = np.array([3, 500])
    xt = D.q_sample(x0, t, e, FULL)
    eps_hat = Tensor(rng.standard_normal(x0.shape), requires_grad=True)
    v = Tensor(rng.uniform(0, 1, x0.shape), requires_grad=True)
    total, _, _ = D.hybrid_loss(e, (eps_hat, v), x0, xt, t, FULL, lam=lam)
    total.backward()
    return eps_hat, v, (e, x0, xt, t)


def test_variance_head_gradient_gated_by_lambda(rng):
    _, v0, _ = _branch_grads(0.0, rng)
    assert v0.grad is None or not np.any(v0.grad)
    _, v1, _ = _branch_grads(1e-3, rng)
    assert np.any(v1.grad)


def test_vlb_does_not_reach_eps_head(rng):
    eps_hat, _, (e, x0, xt, t) = _branch_grads(1e-3, rng)
    expect = 2.0 * (eps_hat.data - e) / e.size
    np.testing.assert_allclose(eps_hat.grad, expect, rtol=1e-10)
    probe = Tensor(eps_hat.data.copy(), requires_grad=True)
    vlb = D.vlb_term((probe, Tensor(np.full(x0.shape, 0.5))), x0, xt, t, FULL)
    tc.mean(vlb).backward()
    assert probe.grad is None or not np.any(probe.grad)


# -- respacing --------------------------------------------------------------------

def test_respace_identity():
    r = D.respace(FULL, 1000)
    np.testing.assert_allclose(r.betas, FULL.betas, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(r.timesteps, FULL.timesteps)


def test_respace_single_step():
    r = D.respace(FULL, 1)
    assert r.T == 1 and r.timesteps[1] == 1000
    assert r.betas[1] == pytest.approx(1 - FULL.alpha_bars[1000], rel=1e-12)


@pytest.mark.parametrize("k", [1, 4, 50, 250, 1000])
def test_respace_preserves_alpha_bar(k):
    r = D.respace(FULL, k)
    assert r.T == k and r.timesteps[-1] == 1000
    assert np.all(np.diff(r.timesteps[1:]) > 0)
    np.testing.assert_allclose(r.alpha_bars[1:], FULL.alpha_bars[r.timesteps[1:]], rtol=0, atol=1e-12)


@given(st.integers(1, 300), st.integers(2, 300))
def test_respace_property(k, T):
    s = D.linear_beta_schedule(T, 1e-3, 5e-2)
    k = min(k, T)
    r = D.respace(s, k)
    np.testing.assert_allclose(r.alpha_bars[1:], s.alpha_bars[r.timesteps[1:]], rtol=0, atol=1e-12)


@pytest.mark.parametrize("k", [0, 1001])
def test_respace_range(k):
    with pytest.raises(ScheduleError):
        D.respace(FULL, k)


def test_schedule_block_round_trip():
    r = D.respace(FULL, 25)
    back = D.schedule_from_block(r.to_block())
    np.testing.assert_array_equal(back.betas, r.betas)
    np.testing.assert_array_equal(back.timesteps, r.timesteps)
    base = D.schedule_from_block(FULL.to_block())
    np.testing.assert_array_equal(base.betas, FULL.betas)
