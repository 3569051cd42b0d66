import numpy as np
import pytest

from bridgediff import diffusion as dm
from bridgediff.rng import Rng
from bridgediff.schedule import (ScheduleError, build_bridge_schedule,
                                 build_gaussian_schedule, transition_coeffs)
from bridgediff.tensor import Tensor, constant


def arr(x, dtype=np.float64):
    return constant(np.asarray(x, dtype=dtype))


def oracle_denoiser(x0_data):
    """Perfect predictor of the combined training target: returns x_t - x0."""
    def fn(x_t, cond, t):
        return constant(x_t.data - x0_data)
    return fn


def bayes_posterior_oracle(x_t, x0_hat, y, t, sched, span=10.0, n=40001):
    """Numerically integrate the product of the two Gaussian densities
    (marginal at t-1 and transition t-1 -> t) and return its moments."""
    m, d = sched.m, sched.delta
    prior_mean = (1 - m[t - 1]) * x0_hat + m[t - 1] * y
    prior_var = d[t - 1]
    a, b, tvar = transition_coeffs(sched, t)
    lo = prior_mean - span * np.sqrt(prior_var)
    hi = prior_mean + span * np.sqrt(prior_var)
    grid = np.linspace(lo, hi, n)
    logp = -0.5 * (grid - prior_mean) ** 2 / prior_var
    logp += -0.5 * (x_t - a * grid - b * y) ** 2 / tvar
    w = np.exp(logp - logp.max())
    w /= np.trapezoid(w, grid)
    mean = np.trapezoid(w * grid, grid)
    var = np.trapezoid(w * (grid - mean) ** 2, grid)
    return mean, var


# ---- forward marginal -------------------------------------------------------

def test_forward_endpoints_exact():
    sched = build_bridge_schedule(8)
    rng = Rng(0)
    x0 = arr(rng.child("x0").normal((2, 3, 4, 4)))
    y = arr(rng.child("y").normal((2, 3, 4, 4)))
    eps = arr(rng.child("e").normal((2, 3, 4, 4)))
    assert np.array_equal(dm.bridge_forward_sample(x0, y, 0, eps, sched).data, x0.data)
    assert np.array_equal(dm.bridge_forward_sample(x0, y, 8, eps, sched).data, y.data)


def test_forward_midpoint_scalar():
    sched = build_bridge_schedule(8)
    out = dm.bridge_forward_sample(arr([0.0]), arr([1.0]), 4, arr([0.0]), sched)
    assert abs(out.data[0] - 0.5) < 1e-15


def test_forward_monte_carlo_moments():
    T, t, n = 8, 3, 100_000
    sched = build_bridge_schedule(T)
    rng = Rng(17)
    x0v, yv = 1.0, 3.0
    x0 = arr(np.full(n, x0v))
    y = arr(np.full(n, yv))
    eps = arr(rng.normal(n))
    xt = dm.bridge_forward_sample(x0, y, t, eps, sched).data
    want_mean = (1 - sched.m[t]) * x0v + sched.m[t] * yv
    want_var = sched.delta[t]
    assert abs(xt.mean() - want_mean) / want_mean < 0.01
    assert abs(xt.var() - want_var) / want_var < 0.01


def test_forward_t_out_of_range():
    sched = build_bridge_schedule(4)
    with pytest.raises(ScheduleError):
        dm.bridge_forward_sample(arr([0.0]), arr([1.0]), 5, arr([0.0]), sched)


# ---- transition -------------------------------------------------------------

def test_transition_hand_case():
    sched = build_bridge_schedule(4)
    a, b, var = transition_coeffs(sched, 2)
    mean = a * 0.25 + b * 1.0
    assert abs(mean - 0.5) < 1e-15
    assert abs(var - 1 / 3) < 1e-15


def test_transition_endpoint_returns_y():
    sched = build_bridge_schedule(4)
    rng = Rng(2)
    x_prev = arr(rng.normal(16))
    y = arr(rng.child("y").normal(16))
    out = dm.bridge_transition_sample(x_prev, y, 4, sched, rng.child("z"))
    assert np.array_equal(out.data, y.data)


@pytest.mark.parametrize("t", range(1, 9))
def test_marginal_transition_composition(t):
    """Drawing x_{t-1} from the marginal then stepping with the transition
    reproduces the marginal at t (analytic on tables, Monte-Carlo on draws)."""
    T, n = 8, 100_000
    sched = build_bridge_schedule(T)
    m, d = sched.m, sched.delta
    a, b, tvar = transition_coeffs(sched, t)
    # analytic composition identity at 1e-12
    mean_prev_coef_x0 = 1 - m[t - 1]
    composed_x0 = a * mean_prev_coef_x0
    composed_y = a * m[t - 1] + b
    assert abs(composed_x0 - (1 - m[t])) < 1e-12
    assert abs(composed_y - m[t]) < 1e-12
    assert abs((a * a * d[t - 1] + tvar) - d[t]) < 1e-12

    rng = Rng(300 + t)
    x0v, yv = 1.0, 3.0
    x0 = arr(np.full(n, x0v))
    y = arr(np.full(n, yv))
    eps = arr(rng.child("eps").normal(n))
    x_prev = dm.bridge_forward_sample(x0, y, t - 1, eps, sched)
    xt = dm.bridge_transition_sample(x_prev, y, t, sched, rng.child("step")).data
    want_mean = (1 - m[t]) * x0v + m[t] * yv
    assert abs(xt.mean() - want_mean) / want_mean < 0.01
    if t < 8:
        assert abs(xt.var() - d[t]) / d[t] < 0.01
    else:
        assert xt.var() == 0.0  # pinned endpoint


# ---- x0 recovery -------------------------------------------------------------

def test_x0_from_prediction_trivial():
    xt = arr([1.5, -2.0])
    assert np.array_equal(dm.x0_from_prediction(xt, xt).data, np.zeros(2))


def test_x0_from_prediction_midpoint():
    sched = build_bridge_schedule(8)
    x0, y = arr([0.0]), arr([1.0])
    xt = dm.bridge_forward_sample(x0, y, 4, arr([0.0]), sched)
    pred = arr([0.5])
    assert abs(dm.x0_from_prediction(xt, pred).data[0]) < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_x0_recovery_from_target(seed):
    T = 8
    sched = build_bridge_schedule(T)
    rng = Rng(seed)
    t = int(rng.child("t").integers(1, T + 1))
    x0 = np.asarray(rng.child("x0").normal(32), dtype=np.float32)
    y = np.asarray(rng.child("y").normal(32), dtype=np.float32)
    eps = np.asarray(rng.child("e").normal(32), dtype=np.float32)
    xt = dm.bridge_forward_sample(arr(x0, np.float32), arr(y, np.float32), t,
                                  arr(eps, np.float32), sched)
    m32 = sched.table("m", np.float32)
    d32 = sched.table("delta", np.float32)
    target = m32[t] * (y - x0) + np.sqrt(d32[t]) * eps
    x0_hat = dm.x0_from_prediction(xt, arr(target, np.float32))
    assert np.allclose(x0_hat.data, x0, atol=1e-6)


# ---- posterior ----------------------------------------------------------------

def test_posterior_hand_case():
    sched = build_bridge_schedule(4)
    mean, var = dm.bridge_posterior(arr([0.5]), arr([0.0]), arr([1.0]), 2, sched)
    assert abs(mean.data[0] - 0.25) < 1e-15
    assert abs(var - 0.25) < 1e-15


def test_posterior_terminal_step():
    sched = build_bridge_schedule(4)
    x0_hat = arr([0.77])
    mean, var = dm.bridge_posterior(arr([0.4]), x0_hat, arr([1.0]), 1, sched)
    assert np.array_equal(mean.data, x0_hat.data)
    assert var == 0.0


def test_posterior_first_reverse_step_is_marginal():
    sched = build_bridge_schedule(4)
    mean, var = dm.bridge_posterior(arr([1.0]), arr([0.2]), arr([1.0]), 4, sched)
    expected = (1 - sched.m[3]) * 0.2 + sched.m[3] * 1.0
    assert abs(mean.data[0] - expected) < 1e-15
    assert var == sched.delta[3]


@pytest.mark.parametrize("seed", range(12))
def test_posterior_matches_bayes_oracle(seed):
    T = 8
    sched = build_bridge_schedule(T)
    rng = Rng(1000 + seed)
    t = int(rng.child("t").integers(2, T))   # interior: generic formula
    x_t = float(rng.child("xt").normal()) * 0.5
    x0_hat = float(rng.child("x0").normal()) * 0.5
    y = float(rng.child("y").normal()) * 0.5
    mean, var = dm.bridge_posterior(arr([x_t]), arr([x0_hat]), arr([y]), t, sched)
    o_mean, o_var = bayes_posterior_oracle(x_t, x0_hat, y, t, sched)
    assert abs(mean.data[0] - o_mean) < 1e-6
    assert abs(var - o_var) < 1e-6
    assert var == sched.delta_tilde[t]


# ---- reverse steps and chains --------------------------------------------------

def test_reverse_step_terminal_recovers_x0():
    sched = build_bridge_schedule(8)
    rng = Rng(5)
    x0 = np.asarray(rng.child("x0").normal(16))
    y = np.asarray(rng.child("y").normal(16))
    eps = np.asarray(rng.child("e").normal(16))
    xt = dm.bridge_forward_sample(arr(x0), arr(y), 1, arr(eps), sched)
    pred = constant(xt.data - x0)
    out = dm.bridge_reverse_step(xt, pred, arr(y), 1, sched, deterministic=True)
    assert np.allclose(out.sample.data, x0, atol=1e-12)
    assert out.variance == 0.0


def test_oracle_reverse_chain_reconstructs_x0_f32():
    T = 8
    sched = build_bridge_schedule(T)
    rng = Rng(6)
    x0 = np.asarray(rng.child("x0").normal(4), dtype=np.float32)
    y = np.asarray(rng.child("y").normal(4), dtype=np.float32)
    out = dm.bridge_sample_loop(oracle_denoiser(x0), arr(y, np.float32), None,
                                sched, stride=1, deterministic=True)
    assert np.allclose(out.data, x0, atol=1e-4)


def test_oracle_reverse_chain_f64_tight():
    T = 16
    sched = build_bridge_schedule(T)
    rng = Rng(7)
    x0 = rng.child("x0").normal((1, 3, 8, 8))
    y = rng.child("y").normal((1, 3, 8, 8))
    out = dm.bridge_sample_loop(oracle_denoiser(x0), arr(y), None, sched,
                                stride=1, deterministic=True)
    assert np.mean((out.data - x0) ** 2) < 1e-8


def test_single_jump_recovery():
    T = 8
    sched = build_bridge_schedule(T)
    rng = Rng(8)
    x0 = rng.child("x0").normal(8)
    y = rng.child("y").normal(8)
    out = dm.bridge_sample_loop(oracle_denoiser(x0), arr(y), None, sched,
                                stride=T, deterministic=True)
    assert np.allclose(out.data, x0, atol=1e-12)


def test_degenerate_bridge_zero_denoiser():
    # identical domains + a denoiser that predicts nothing: every posterior
    # mean collapses onto the shared point
    T = 8
    sched = build_bridge_schedule(T)
    x0 = Rng(9).normal(8)
    zero = lambda x_t, cond, t: constant(np.zeros_like(x_t.data))
    out = dm.bridge_sample_loop(zero, arr(x0), None, sched, stride=1, deterministic=True)
    assert np.allclose(out.data, x0, atol=1e-12)


def test_stochastic_step_matches_posterior_moments():
    T, n = 8, 100_000
    sched = build_bridge_schedule(T)
    rng = Rng(51)
    t = 5
    x0v, yv = 1.0, 3.0
    x0 = np.full(n, x0v)
    y = arr(np.full(n, yv))
    eps = arr(rng.child("e").normal(n))
    xt = dm.bridge_forward_sample(arr(x0), y, t, eps, sched)
    pred = constant(xt.data - x0)
    out = dm.bridge_reverse_step(xt, pred, y, t, sched, rng=rng.child("z"))
    # per-element posterior means differ; compare against them elementwise
    mean, var = dm.bridge_posterior(xt, constant(x0), y, t, sched)
    resid = out.sample.data - mean.data
    assert abs(resid.mean()) < 0.01 * np.sqrt(var)
    assert abs(resid.var() - var) / var < 0.01


def test_sample_loop_rejects_bad_stride():
    sched = build_bridge_schedule(8)
    with pytest.raises(ScheduleError):
        dm.bridge_sample_loop(oracle_denoiser(np.zeros(2)), arr(np.zeros(2)), None,
                              sched, stride=3, deterministic=True)


# ---- bridge loss ----------------------------------------------------------------

def test_loss_zero_for_oracle_target_predictor():
    T = 8
    sched = build_bridge_schedule(T)
    rng = Rng(12)
    x0 = arr(rng.child("x0").normal((1, 2, 4, 4)), np.float32)
    y = arr(rng.child("y").normal((1, 2, 4, 4)), np.float32)

    def oracle(x_t, cond, t):
        return constant(x_t.data - x0.data)

    loss = dm.bridge_loss(oracle, x0, y, None, sched, rng.child("draw"))
    assert loss.item() < 1e-12


def test_loss_zero_denoiser_at_T_is_endpoint_gap():
    T = 8
    sched = build_bridge_schedule(T)
    rng = Rng(13)
    x0 = arr(rng.child("x0").normal((1, 2, 4, 4)), np.float32)
    y = arr(rng.child("y").normal((1, 2, 4, 4)), np.float32)
    zero = lambda x_t, cond, t: constant(np.zeros_like(x_t.data))
    loss = dm.bridge_loss(zero, x0, y, None, sched, rng.child("draw"), t=T)
    want = np.mean((y.data - x0.data) ** 2)
    assert abs(loss.item() - want) < 1e-6


def test_loss_elbo_weighting_scales_by_c_eps():
    T = 8
    sched = build_bridge_schedule(T)
    rng = Rng(14)
    x0 = arr(rng.child("x0").normal((1, 2, 4, 4)), np.float32)
    y = arr(rng.child("y").normal((1, 2, 4, 4)), np.float32)
    zero = lambda x_t, cond, t: constant(np.zeros_like(x_t.data))
    t = 3
    plain = dm.bridge_loss(zero, x0, y, None, sched, Rng(14).child("d"), t=t)
    elbo = dm.bridge_loss(zero, x0, y, None, sched, Rng(14).child("d"),
                          weighting="elbo", t=t)
    assert abs(elbo.item() - plain.item() * sched.c_eps[t]) < 1e-7


def test_condition_blind_denoiser_gives_identical_losses():
    """With a denoiser that ignores its condition channels, conditional and
    unconditional losses on identical draws coincide."""
    T = 8
    sched = build_bridge_schedule(T)
    rng = Rng(15)
    x0 = arr(rng.child("x0").normal((1, 2, 4, 4)), np.float32)
    y = arr(rng.child("y").normal((1, 2, 4, 4)), np.float32)
    cond = arr(rng.child("c").normal((1, 3, 4, 4)), np.float32)
    blind = lambda x_t, c, t: constant(0.5 * x_t.data)
    with_c = dm.bridge_loss(blind, x0, y, cond, sched, Rng(99).child("d"))
    without = dm.bridge_loss(blind, x0, y, None, sched, Rng(99).child("d"))
    assert abs(with_c.item() - without.item()) < 1e-7


def test_loss_rejects_condition_shape_mismatch():
    sched = build_bridge_schedule(8)
    rng = Rng(16)
    x0 = arr(np.zeros((1, 2, 4, 4)), np.float32)
    zero = lambda x_t, cond, t: constant(np.zeros_like(x_t.data))
    with pytest.raises(ValueError):
        dm.bridge_loss(zero, x0, x0, arr(np.zeros((1, 3, 8, 8)), np.float32),
                       sched, rng)


# ---- gaussian baseline -----------------------------------------------------------

def test_gaussian_forward_identity_at_zero():
    g = build_gaussian_schedule(10, 1e-4, 0.02)
    x0 = arr(Rng(17).normal(8))
    assert np.array_equal(dm.gaussian_forward_sample(x0, 0, arr(np.zeros(8)), g).data,
                          x0.data)


def test_gaussian_forward_hand_value():
    g = build_gaussian_schedule(2, 0.1, 0.2)
    out = dm.gaussian_forward_sample(arr([1.0]), 2, arr([0.0]), g)
    assert abs(out.data[0] - np.sqrt(0.72)) < 1e-12
    assert abs(out.data[0] - 0.848528137423857) < 1e-12


def test_gaussian_forward_monte_carlo():
    g = build_gaussian_schedule(10, 0.01, 0.2)
    t, n = 6, 100_000
    rng = Rng(18)
    x0 = arr(np.full(n, 2.0))
    eps = arr(rng.normal(n))
    xt = dm.gaussian_forward_sample(x0, t, eps, g).data
    want_mean = np.sqrt(g.alpha_bar[t]) * 2.0
    want_var = 1 - g.alpha_bar[t]
    assert abs(xt.mean() - want_mean) / want_mean < 0.01
    assert abs(xt.var() - want_var) / want_var < 0.01


def test_gaussian_reverse_true_eps_at_t1_recovers_x0():
    g = build_gaussian_schedule(10, 1e-4, 0.02)
    rng = Rng(19)
    x0 = rng.child("x0").normal(16)
    eps = rng.child("e").normal(16)
    x1 = dm.gaussian_forward_sample(arr(x0), 1, arr(eps), g)
    out = dm.gaussian_reverse_step(x1, arr(eps), 1, None, g)
    assert np.allclose(out.data, x0, atol=1e-5)


def test_gaussian_reverse_no_noise_limit():
    g = build_gaussian_schedule(5, 1e-9, 1e-8)
    xt = arr(Rng(20).normal(8))
    out = dm.gaussian_reverse_step(xt, arr(np.zeros(8)), 3, None, g,
                                   deterministic=True)
    assert np.allclose(out.data, xt.data, atol=1e-6)


def test_gaussian_reverse_matches_hand_formula():
    g = build_gaussian_schedule(10, 0.01, 0.2)
    rng = Rng(21)
    t = 4
    xt = float(rng.child("x").normal())
    ep = float(rng.child("p").normal())
    beta = g.beta[t]
    ab = g.alpha_bar[t]
    want = (xt - beta / np.sqrt(1 - ab) * ep) / np.sqrt(1 - beta)
    out = dm.gaussian_reverse_step(arr([xt]), arr([ep]), t, None, g,
                                   deterministic=True)
    assert abs(out.data[0] - want) < 1e-12


def test_gaussian_loss_oracle_and_zero():
    g = build_gaussian_schedule(10, 0.01, 0.2)
    rng = Rng(22)
    x0 = arr(rng.child("x0").normal((1, 1, 100, 100)), np.float32)

    def oracle(x_t, cond, t):
        ab = g.table("alpha_bar", np.float32)[t]
        eps = (x_t.data - np.sqrt(ab) * x0.data) / np.sqrt(1 - ab)
        return constant(eps)

    assert dm.gaussian_loss(oracle, x0, None, g, rng.child("a")).item() < 1e-9
    zero = lambda x_t, cond, t: constant(np.zeros_like(x_t.data))
    loss = dm.gaussian_loss(zero, x0, None, g, rng.child("b"))
    assert abs(loss.item() - 1.0) < 0.05   # mean(eps^2) over 10^4 draws


def test_gaussian_sample_loop_runs_and_is_deterministic():
    g = build_gaussian_schedule(10, 0.01, 0.2)
    zero = lambda x_t, cond, t: constant(np.zeros_like(x_t.data))
    a = dm.gaussian_sample_loop(zero, (1, 2, 4, 4), None, g, stride=2,
                                rng=Rng(23), deterministic=True)
    b = dm.gaussian_sample_loop(zero, (1, 2, 4, 4), None, g, stride=2,
                                rng=Rng(23), deterministic=True)
    assert np.array_equal(a.data, b.data)
    assert a.shape == (1, 2, 4, 4)
