"""Bridge and Gaussian diffusion processes: forward sampling, transitions,
reverse-step posteriors, sampling loops, and training losses.

Conventions
-----------
* ``x0`` is the target-domain latent, ``y`` the source-domain latent; the
  bridge is pinned to ``x0`` at t = 0 and to ``y`` at t = T.
* The denoiser is any callable ``denoiser(x_t, cond, t) -> Tensor``
  predicting the combined training target ``m_t (y - x0) + sqrt(delta_t) eps``.
  Because the forward marginal gives ``x_t = x0 + m_t (y - x0) +
  sqrt(delta_t) eps``, that target always equals ``x_t - x0``, so the
  implied estimate is ``x0_hat = x_t - prediction``.
* Sampling helpers run outside the autodiff graph; only the losses record
  gradients (through the denoiser).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .rng import Rng
from .schedule import BridgeSchedule, GaussianSchedule, ScheduleError, transition_coeffs
from .tensor import Tensor, constant, no_grad, tmean, mul, sub

DenoiserFn = Callable[[Tensor, Optional[Tensor], int], Tensor]


@dataclass
class BridgeBatch:
    """One training draw: endpoints, optional condition, timestep, noise."""
    x0: Tensor
    y: Tensor
    cond: Optional[Tensor]
    t: int
    eps: Tensor


@dataclass
class ReverseStepOut:
    mean: Tensor
    variance: float
    sample: Tensor


def _check_t(t: int, lo: int, hi: int) -> None:
    if not (lo <= t <= hi):
        raise ScheduleError(f"timestep {t} outside [{lo}, {hi}]")


def _same_shape(*tensors: Tensor) -> None:
    shapes = {tt.shape for tt in tensors}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {shapes}")


def bridge_forward_sample(x0: Tensor, y: Tensor, t: int, eps: Tensor,
                          sched: BridgeSchedule) -> Tensor:
    """Marginal draw x_t = (1 - m_t) x0 + m_t y + sqrt(delta_t) eps."""
    _same_shape(x0, y, eps)
    _check_t(t, 0, sched.T)
    m = sched.table("m", x0.dtype)[t]
    sd = np.sqrt(sched.table("delta", x0.dtype)[t])
    return constant((1 - m) * x0.data + m * y.data + sd * eps.data)


def bridge_transition_sample(x_prev: Tensor, y: Tensor, t: int,
                             sched: BridgeSchedule, rng: Rng) -> Tensor:
    """One forward step t-1 -> t; exact endpoint at t = T (returns y)."""
    _check_t(t, 1, sched.T)
    a, b, var = transition_coeffs(sched, t)
    mean = a * x_prev.data + b * y.data
    if var > 0:
        z = rng.normal(mean.shape).astype(x_prev.dtype)
        mean = mean + float(np.sqrt(var)) * z
    return constant(mean)


def x0_from_prediction(x_t: Tensor, pred: Tensor) -> Tensor:
    """Invert the combined-target parameterization: x0_hat = x_t - pred."""
    _same_shape(x_t, pred)
    return constant(x_t.data - pred.data)


def _posterior_arrays(x_t: np.ndarray, x0_hat: np.ndarray, y: np.ndarray,
                      t: int, s: int, sched: BridgeSchedule) -> tuple[np.ndarray, float]:
    """Reverse conditional for a jump t -> s (s < t) given an x0 estimate.

    Combines the forward marginal at s with the s -> t transition by
    Gaussian conjugacy. Both endpoint singularities are handled explicitly:
    s = 0 returns the estimate itself, and at t = T the transition carries
    no information, leaving the marginal at s.
    """
    if s == 0:
        return x0_hat.copy(), 0.0
    m = sched.m
    delta = sched.delta
    marg_mean = (1.0 - m[s]) * x0_hat + m[s] * y
    if t == sched.T:
        return marg_mean, float(delta[s])
    a, b, var_ts = transition_coeffs(sched, t, s)
    mean = (var_ts / delta[t]) * marg_mean + (a * delta[s] / delta[t]) * (x_t - b * y)
    var = var_ts * delta[s] / delta[t]
    return mean, float(var)


def bridge_posterior(x_t: Tensor, x0_hat: Tensor, y: Tensor, t: int,
                     sched: BridgeSchedule) -> tuple[Tensor, float]:
    """Adjacent-step reverse conditional p(x_{t-1} | x_t, x0_hat, y).

    Variance equals ``sched.delta_tilde[t]``.
    """
    _check_t(t, 1, sched.T)
    mean, var = _posterior_arrays(x_t.data.astype(np.float64),
                                  x0_hat.data.astype(np.float64),
                                  y.data.astype(np.float64), t, t - 1, sched)
    return constant(mean.astype(x_t.dtype)), var


def bridge_reverse_step(x_t: Tensor, pred: Tensor, y: Tensor, t: int,
                        sched: BridgeSchedule, rng: Optional[Rng] = None,
                        deterministic: bool = False) -> ReverseStepOut:
    """x0_from_prediction composed with bridge_posterior, then a draw."""
    _check_t(t, 1, sched.T)
    x0_hat = x0_from_prediction(x_t, pred)
    mean, var = bridge_posterior(x_t, x0_hat, y, t, sched)
    return _finish_step(mean, var, rng, deterministic, x_t.dtype)


def _finish_step(mean: Tensor, var: float, rng: Optional[Rng],
                 deterministic: bool, dtype) -> ReverseStepOut:
    if deterministic or var == 0.0:
        return ReverseStepOut(mean, var, constant(mean.data.copy()))
    if rng is None:
        raise ValueError("stochastic step requires an Rng")
    z = rng.normal(mean.shape).astype(dtype)
    return ReverseStepOut(mean, var, constant(mean.data + float(np.sqrt(var)) * z))


def bridge_sample_loop(denoiser: DenoiserFn, y: Tensor, cond: Optional[Tensor],
                       sched: BridgeSchedule, stride: int = 1,
                       rng: Optional[Rng] = None, deterministic: bool = False,
                       progress: Optional[Callable[[int], None]] = None) -> Tensor:
    """Reverse chain from x_T = y down to the x0 estimate.

    Visits t = T, T - stride, ..., stride; each visit jumps ``stride`` steps
    using the conjugate posterior for that gap (identical to
    bridge_reverse_step when stride = 1).
    """
    if stride < 1 or sched.T % stride != 0:
        raise ScheduleError(f"stride {stride} must be >= 1 and divide T={sched.T}")
    x = constant(y.data.copy())
    with no_grad():
        for t in range(sched.T, 0, -stride):
            pred = denoiser(x, cond, t)
            x0_hat = x.data.astype(np.float64) - pred.data.astype(np.float64)
            mean, var = _posterior_arrays(x.data.astype(np.float64), x0_hat,
                                          y.data.astype(np.float64), t, t - stride, sched)
            step = _finish_step(constant(mean.astype(x.dtype)), var, rng, deterministic, x.dtype)
            x = step.sample
            if progress is not None:
                progress(t)
    return x


def draw_bridge_batch(x0: Tensor, y: Tensor, cond: Optional[Tensor],
                      sched: BridgeSchedule, rng: Rng, t: Optional[int] = None) -> BridgeBatch:
    """Uniform timestep in {1..T} plus a standard-normal noise draw."""
    if t is None:
        t = int(rng.child("t").integers(1, sched.T + 1))
    eps = constant(rng.child("eps").normal(x0.shape).astype(x0.dtype))
    return BridgeBatch(x0=x0, y=y, cond=cond, t=t, eps=eps)


def bridge_training_target(batch: BridgeBatch, sched: BridgeSchedule) -> Tensor:
    m = sched.table("m", batch.x0.dtype)[batch.t]
    sd = np.sqrt(sched.table("delta", batch.x0.dtype)[batch.t])
    return constant(m * (batch.y.data - batch.x0.data) + sd * batch.eps.data)


def bridge_loss(denoiser: DenoiserFn, x0: Tensor, y: Tensor, cond: Optional[Tensor],
                sched: BridgeSchedule, rng: Rng, weighting: str = "simplified",
                t: Optional[int] = None) -> Tensor:
    """Weighted MSE against the combined target; differentiable through the
    denoiser. ``weighting`` is "simplified" (all-ones) or "elbo" (per-step
    c_eps weights, zero at t = T)."""
    if weighting not in ("simplified", "elbo"):
        raise ValueError(f"unknown weighting {weighting!r}")
    _same_shape(x0, y)
    if cond is not None and cond.shape[2:] != x0.shape[2:]:
        raise ValueError(f"condition spatial dims {cond.shape[2:]} != latent {x0.shape[2:]}")
    batch = draw_bridge_batch(x0, y, cond, sched, rng, t=t)
    x_t = bridge_forward_sample(x0, y, batch.t, batch.eps, sched)
    target = bridge_training_target(batch, sched)
    pred = denoiser(x_t, cond, batch.t)
    diff = sub(target, pred)
    loss = tmean(mul(diff, diff))
    if weighting == "elbo":
        loss = mul(loss, float(sched.c_eps[batch.t]))
    return loss


def gaussian_forward_sample(x0: Tensor, t: int, eps: Tensor,
                            gsched: GaussianSchedule) -> Tensor:
    """Closed-form noising x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _same_shape(x0, eps)
    _check_t(t, 0, gsched.T)
    ab = gsched.table("alpha_bar", x0.dtype)[t]
    return constant(np.sqrt(ab) * x0.data + np.sqrt(1 - ab) * eps.data)


def gaussian_reverse_step(x_t: Tensor, eps_pred: Tensor, t: int,
                          cond: Optional[Tensor], gsched: GaussianSchedule,
                          rng: Optional[Rng] = None,
                          deterministic: bool = False) -> Tensor:
    """Ancestral step with mean (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(1-beta_t)
    and variance beta_t; the t = 1 step adds no noise. ``cond`` is unused here
    (conditioning enters through the denoiser input) and kept for signature
    symmetry with the bridge step."""
    _check_t(t, 1, gsched.T)
    beta = float(gsched.beta[t])
    ab = float(gsched.alpha_bar[t])
    mean = (x_t.data - (beta / np.sqrt(1 - ab)) * eps_pred.data) / np.sqrt(1 - beta)
    if t == 1 or deterministic:
        return constant(mean.astype(x_t.dtype))
    if rng is None:
        raise ValueError("stochastic step requires an Rng")
    z = rng.normal(mean.shape).astype(x_t.dtype)
    return constant((mean + np.sqrt(beta) * z).astype(x_t.dtype))


def gaussian_sample_loop(denoiser: DenoiserFn, shape: tuple[int, ...],
                         cond: Optional[Tensor], gsched: GaussianSchedule,
                         stride: int = 1, rng: Optional[Rng] = None,
                         deterministic: bool = False, dtype=np.float32,
                         progress: Optional[Callable[[int], None]] = None) -> Tensor:
    """Reverse chain from pure noise. stride = 1 uses gaussian_reverse_step;
    larger strides jump via the x0-estimate posterior over the gap."""
    if stride < 1 or gsched.T % stride != 0:
        raise ScheduleError(f"stride {stride} must be >= 1 and divide T={gsched.T}")
    if rng is None:
        raise ValueError("gaussian sampling starts from noise and needs an Rng")
    ab = gsched.alpha_bar
    x = constant(rng.child("xT").normal(shape).astype(dtype))
    step_rng = rng.child("steps")
    with no_grad():
        for t in range(gsched.T, 0, -stride):
            eps_hat = denoiser(x, cond, t)
            if stride == 1:
                x = gaussian_reverse_step(x, eps_hat, t, cond, gsched,
                                          rng=step_rng, deterministic=deterministic)
            else:
                x0_hat = (x.data - np.sqrt(1 - ab[t]) * eps_hat.data) / np.sqrt(ab[t])
                s = t - stride
                if s == 0:
                    x = constant(x0_hat.astype(dtype))
                else:
                    r = ab[t] / ab[s]
                    denom = 1 - ab[t]
                    mean = (np.sqrt(ab[s]) * (1 - r) * x0_hat + np.sqrt(r) * (1 - ab[s]) * x.data) / denom
                    var = (1 - ab[s]) * (1 - r) / denom
                    if deterministic or var <= 0:
                        x = constant(mean.astype(dtype))
                    else:
                        z = step_rng.normal(mean.shape)
                        x = constant((mean + np.sqrt(var) * z).astype(dtype))
            if progress is not None:
                progress(t)
    return x


def gaussian_loss(denoiser: DenoiserFn, x0: Tensor, cond: Optional[Tensor],
                  gsched: GaussianSchedule, rng: Rng,
                  t: Optional[int] = None) -> Tensor:
    """Noise-prediction MSE with a uniform timestep draw."""
    if cond is not None and cond.shape[2:] != x0.shape[2:]:
        raise ValueError(f"condition spatial dims {cond.shape[2:]} != latent {x0.shape[2:]}")
    if t is None:
        t = int(rng.child("t").integers(1, gsched.T + 1))
    eps = constant(rng.child("eps").normal(x0.shape).astype(x0.dtype))
    x_t = gaussian_forward_sample(x0, t, eps, gsched)
    pred = denoiser(x_t, cond, t)
    diff = sub(eps, pred)
    return tmean(mul(diff, diff))
