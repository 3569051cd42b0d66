"""Precomputed timestep tables for the bridge process and the Gaussian
conditional baseline.

Bridge tables, indexed by t = 0..T (entries outside each table's valid
range are zero):

* ``m[t] = t/T`` — mixing coefficient between the two endpoints.
* ``delta[t] = 2(m_t - m_t^2)`` — marginal variance; 0 at both endpoints,
  peaking at 1/2 mid-path.
* ``delta_cond[t] = delta_t - delta_{t-1} (1-m_t)^2/(1-m_{t-1})^2`` — the
  one-step transition variance (valid for t = 1..T; the t = T value is 0).
* ``delta_tilde[t] = delta_cond_t * delta_{t-1} / delta_t`` — reverse-step
  posterior variance for 1 < t < T. The generic formula is 0/0 at both ends:
  ``delta_tilde[1] = 0`` (the final step is deterministic) and
  ``delta_tilde[T] = delta[T-1]`` (the first reverse step carries no
  likelihood information, since the transition coefficient into t = T
  vanishes, so the reverse distribution is the forward marginal at T-1).
* ``c_eps[t] = (1 - m_{t-1}) delta_cond_t / delta_t`` — per-step weight for
  the variational form of the training loss; 0/0 at t = T, stored as 0.

Tables are computed in f64 and kept in both precisions.
"""

from __future__ import annotations

import io

import numpy as np


class ScheduleError(ValueError):
    pass


class BridgeSchedule:
    """Immutable per-timestep quantities for a T-step bridge."""

    __slots__ = ("T", "m", "delta", "delta_cond", "delta_tilde", "c_eps", "_f32")

    def __init__(self, T: int, m, delta, delta_cond, delta_tilde, c_eps):
        self.T = T
        self.m = m
        self.delta = delta
        self.delta_cond = delta_cond
        self.delta_tilde = delta_tilde
        self.c_eps = c_eps
        self._f32 = {
            name: getattr(self, name).astype(np.float32)
            for name in ("m", "delta", "delta_cond", "delta_tilde", "c_eps")
        }

    def table(self, name: str, dtype=np.float64) -> np.ndarray:
        """Table in the requested precision (f64 canonical, f32 cached)."""
        if np.dtype(dtype) == np.float32:
            return self._f32[name]
        return getattr(self, name)


class GaussianSchedule:
    __slots__ = ("T", "beta", "alpha_bar", "_f32")

    def __init__(self, T: int, beta, alpha_bar):
        self.T = T
        self.beta = beta
        self.alpha_bar = alpha_bar
        self._f32 = {
            "beta": beta.astype(np.float32),
            "alpha_bar": alpha_bar.astype(np.float32),
        }

    def table(self, name: str, dtype=np.float64) -> np.ndarray:
        if np.dtype(dtype) == np.float32:
            return self._f32[name]
        return getattr(self, name)


def build_bridge_schedule(T: int) -> BridgeSchedule:
    if T < 2:
        raise ScheduleError(f"bridge schedule needs T >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    m = t / T
    delta = 2.0 * (m - m * m)

    delta_cond = np.zeros(T + 1)
    ratio_sq = np.zeros(T + 1)
    ratio_sq[1:] = ((1.0 - m[1:]) / (1.0 - m[:-1])) ** 2
    delta_cond[1:] = delta[1:] - delta[:-1] * ratio_sq[1:]
    delta_cond = np.maximum(delta_cond, 0.0)  # clamp -0.0 / rounding dust

    delta_tilde = np.zeros(T + 1)
    if T > 2:
        interior = slice(2, T)
        delta_tilde[interior] = delta_cond[interior] * delta[1:T - 1] / delta[interior]
    delta_tilde[1] = 0.0
    delta_tilde[T] = delta[T - 1]

    c_eps = np.zeros(T + 1)
    c_eps[1:T] = (1.0 - m[0:T - 1]) * delta_cond[1:T] / delta[1:T]
    c_eps[T] = 0.0

    return BridgeSchedule(T, m, delta, delta_cond, delta_tilde, c_eps)


def build_gaussian_schedule(T: int, beta_start: float, beta_end: float) -> GaussianSchedule:
    if T < 1:
        raise ScheduleError(f"gaussian schedule needs T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.zeros(T + 1)
    if T == 1:
        beta[1] = beta_start
    else:
        beta[1:] = beta_start + np.arange(T) * (beta_end - beta_start) / (T - 1)
    alpha_bar = np.ones(T + 1)
    alpha_bar[1:] = np.cumprod(1.0 - beta[1:])
    return GaussianSchedule(T, beta, alpha_bar)


def transition_coeffs(sched: BridgeSchedule, t: int, s: int | None = None) -> tuple[float, float, float]:
    """Coefficients (a, b, var) of the step s -> t conditional:
    mean = a * x_s + b * y, variance = var. Default s = t - 1."""
    if s is None:
        s = t - 1
    if not (0 <= s < t <= sched.T):
        raise ScheduleError(f"invalid step pair s={s}, t={t} for T={sched.T}")
    a = (1.0 - sched.m[t]) / (1.0 - sched.m[s])
    b = sched.m[t] - a * sched.m[s]
    var = sched.delta[t] - a * a * sched.delta[s]
    return float(a), float(b), float(max(var, 0.0))


def schedule_csv(sched: BridgeSchedule) -> str:
    """Full bridge table as CSV (one row per timestep)."""
    buf = io.StringIO()
    buf.write("t,m,delta,delta_cond,delta_tilde,c_eps\n")
    for t in range(sched.T + 1):
        buf.write(
            f"{t},{sched.m[t]:.12g},{sched.delta[t]:.12g},"
            f"{sched.delta_cond[t]:.12g},{sched.delta_tilde[t]:.12g},{sched.c_eps[t]:.12g}\n"
        )
    return buf.getvalue()
