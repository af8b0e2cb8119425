"""Variance-exploding noise schedule, noising kernel and the two samplers.

All score functions used here are callables ``score_fn(x, t)`` with ``x`` of
shape (n, D) and scalar ``t``; every chain in a batch shares the same time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SamplingDiverged(FloatingPointError):
    def __init__(self, step, t):
        self.step = step
        self.t = t
        super().__init__(f"sampler produced non-finite state at step {step} (t={t:.6g})")


class FlowInversionFailed(FloatingPointError):
    def __init__(self, t, residual):
        self.t, self.residual = t, residual
        super().__init__(f"Heun step inversion did not converge at t={t:.6g} "
                         f"(last update {residual:.3g})")


@dataclass(frozen=True)
class NoiseSchedule:
    """VE schedule: s_t = 1, sigma_t = sigma_min * sqrt((sigma_max/sigma_min)^(2t) - 1)."""

    sigma_min: float = 0.01
    sigma_max: float = 50.0
    t_min: float = 1e-3

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not 0 < self.t_min < 1:
            raise ValueError("need 0 < t_min < 1")

    @property
    def log_ratio(self):
        return float(np.log(self.sigma_max / self.sigma_min))

    def s(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.sigma_min * np.sqrt(np.expm1(2.0 * t * self.log_ratio))

    def g2(self, t):
        """g(t)^2 = d(sigma^2)/dt = 2 sigma dsigma/dt, the rate at which the kernel variance grows.

        With s_t = 1 the drift f vanishes, and this is the diffusion coefficient
        for which the marginals are exactly N(x_0, sigma_t^2 I).
        """
        t = np.asarray(t, dtype=np.float64)
        return 2.0 * self.sigma_min**2 * self.log_ratio * np.exp(2.0 * t * self.log_ratio)

    def clamp(self, t):
        return np.clip(t, self.t_min, 1.0)


def schedule_eval(sched: NoiseSchedule, t):
    """Return (s_t, sigma_t, g2_t) for t in [0, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)) or not np.all(np.isfinite(t_arr)):
        raise ValueError("t must lie in [0, 1]")
    out = sched.s(t_arr), sched.sigma(t_arr), sched.g2(t_arr)
    if t_arr.ndim == 0:
        return tuple(float(v) for v in out)
    return out


def noise_kernel_sample(x0, t, sched: NoiseSchedule, rng=None, eps=None):
    """Draw x_t ~ N(s_t x0, sigma_t^2 I); pass ``eps`` to fix the noise."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < sched.t_min) | (t_arr > 1)):
        raise ValueError("t must lie in [t_min, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        eps = np.random.default_rng() if rng is None else rng
        eps = eps.standard_normal(x0.shape)
    s, sigma = sched.s(t_arr), sched.sigma(t_arr)
    if t_arr.ndim == 1:
        s, sigma = s[:, None], sigma[:, None]
    return s * x0 + sigma * eps


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 1000
    seed: int = 0
    t_start: float = 1.0
    t_end: float | None = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    def grid(self, sched: NoiseSchedule):
        t_end = sched.t_min if self.t_end is None else self.t_end
        return np.linspace(self.t_start, t_end, self.n_steps + 1)


def prior_sample(sched: NoiseSchedule, n, dim, rng):
    return sched.sigma(1.0) * rng.standard_normal((n, dim))


def reverse_sde_sample(score_fn, sched: NoiseSchedule, cfg: SamplerConfig, n, dim,
                       rng=None, x_init=None, return_path=False):
    """Euler-Maruyama integration of the reverse SDE from t_start down to t_end.

    With h = t_i - t_{i+1} > 0 each step is
    ``x <- x + h * g2(t_i) * score(x, t_i) + sqrt(g2(t_i) * h) * z``.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    grid = cfg.grid(sched)
    x = prior_sample(sched, n, dim, rng) if x_init is None else np.array(x_init, dtype=np.float64)
    path = [x] if return_path else None
    for i in range(cfg.n_steps):
        t, h = grid[i], grid[i] - grid[i + 1]
        g2 = float(sched.g2(t))
        x = x + h * g2 * score_fn(x, t) + np.sqrt(g2 * h) * rng.standard_normal(x.shape)
        if not np.isfinite(x).all():
            raise SamplingDiverged(i, t)
        if return_path:
            path.append(x)
    return (x, path) if return_path else x


def flow_drift(score_fn, x, t, sched: NoiseSchedule):
    """Probability-flow velocity f - g^2 score / 2 (f = 0 for the VE schedule)."""
    return -0.5 * float(sched.g2(t)) * score_fn(x, t)


def prob_flow_heun_step(score_fn, x, t, dt, sched: NoiseSchedule):
    """One explicit-trapezoid (Heun) step of the probability-flow ODE; dt may be negative."""
    if dt == 0:
        raise ValueError("dt must be nonzero")
    k1 = flow_drift(score_fn, x, t, sched)
    k2 = flow_drift(score_fn, x + dt * k1, t + dt, sched)
    out = x + 0.5 * dt * (k1 + k2)
    if not np.isfinite(out).all():
        raise SamplingDiverged(-1, t)
    return out


def prob_flow_integrate(score_fn, x, sched: NoiseSchedule, n_steps, forward=True):
    """Heun-integrate the flow on the uniform grid between t_min and 1.

    ``forward=True`` maps data (t_min) to noise (t = 1); ``False`` runs the
    reverse direction, which is how deterministic samples are drawn.
    """
    grid = np.linspace(sched.t_min, 1.0, n_steps + 1)
    if not forward:
        grid = grid[::-1]
    x = np.array(x, dtype=np.float64)
    for i in range(n_steps):
        try:
            x = prob_flow_heun_step(score_fn, x, grid[i], grid[i + 1] - grid[i], sched)
        except SamplingDiverged:
            raise SamplingDiverged(i, grid[i]) from None
    return x


def invert_heun_step(score_fn, x_next, t, dt, sched: NoiseSchedule, tol=1e-13, max_iter=100,
                     stall_tol=1e-6):
    """Solve H(x) = x_next for the Heun step H of size dt starting at time t.

    Fixed-point iteration x <- x_next - dt/2 (k1(x) + k2(x)) contracts when
    dt times the drift Lipschitz constant is below one, which holds on the
    grids used here.  Scores with finite-difference parts carry rounding
    noise that can stall the iteration just above ``tol``; an iterate whose
    last update is below ``stall_tol`` (relative) is then accepted.
    """
    x = x_next - dt * flow_drift(score_fn, x_next, t + dt, sched)
    delta = np.inf
    for _ in range(max_iter):
        k1 = flow_drift(score_fn, x, t, sched)
        k2 = flow_drift(score_fn, x + dt * k1, t + dt, sched)
        x_new = x_next - 0.5 * dt * (k1 + k2)
        if not np.isfinite(x_new).all():
            raise SamplingDiverged(-1, t)
        previous, delta = delta, np.max(np.abs(x_new - x))
        x = x_new
        scale = 1.0 + np.max(np.abs(x))
        if delta <= tol * scale:
            return x
        if delta <= stall_tol * scale and delta > 0.5 * previous:
            return x  # contraction has stopped: rounding noise floor reached
    if delta <= stall_tol * (1.0 + np.max(np.abs(x))):
        return x
    raise FlowInversionFailed(t, float(delta))


def invert_flow(score_fn, x1, sched: NoiseSchedule, n_steps):
    """Exact inverse of ``prob_flow_integrate(..., forward=True)`` on the same grid."""
    grid = np.linspace(sched.t_min, 1.0, n_steps + 1)
    x = np.array(x1, dtype=np.float64)
    for i in range(n_steps - 1, -1, -1):
        x = invert_heun_step(score_fn, x, grid[i], grid[i + 1] - grid[i], sched)
    return x


def prob_flow_sample(score_fn, sched: NoiseSchedule, n, dim, n_steps, rng):
    """Deterministic samples: prior draws pushed from t = 1 to t_min along the flow."""
    x1 = prior_sample(sched, n, dim, rng)
    return prob_flow_integrate(score_fn, x1, sched, n_steps, forward=False)
