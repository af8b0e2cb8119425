"""Denoised posterior moments from a score model, and cumulant diagnostics.

A score model is any object with ``score(x, t)``, ``score_jvp(x, t, v)``,
``score_vjp(x, t, v)`` and a ``schedule`` attribute, operating on batches of
shape (n, D) at a shared scalar time ``t``.

The posterior covariance is only ever exposed as an operator.  Dense
matrices are assembled from D operator applications by ``dense_cov``, which
is meant for tests and small oracle problems.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


def _coeffs(model, t):
    sched = model.schedule
    return float(sched.s(t)), float(sched.sigma(t))


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def denoised_mean(model, x_t, t, score=None):
    """x_hat0 = (x_t + sigma_t^2 * score) / s_t.

    ``score`` may be passed when it was already evaluated at (x_t, t).
    """
    x_t = _batch(x_t)
    s, sigma = _coeffs(model, t)
    if score is None:
        score = model.score(x_t, t)
    return (x_t + sigma**2 * score) / s


def cov_jvp(model, x_t, t, v):
    """Sigma_hat v = (sigma_t^2 / s_t^2) (v + sigma_t^2 * H v), with H the score Jacobian."""
    x_t = _batch(x_t)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), x_t.shape)
    s, sigma = _coeffs(model, t)
    return (sigma**2 / s**2) * (v + sigma**2 * model.score_jvp(x_t, t, v))


def mean_jacobian_t(model, x_t, t, u):
    """Apply (d x_hat0 / d x_t)^T to ``u``: (u + sigma_t^2 * H^T u) / s_t."""
    x_t = _batch(x_t)
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), x_t.shape)
    s, sigma = _coeffs(model, t)
    return (u + sigma**2 * model.score_vjp(x_t, t, u)) / s


def dense_cov(model, x_t, t):
    """Materialise Sigma_hat as (n, D, D) from D operator applications."""
    x_t = _batch(x_t)
    n, D = x_t.shape
    cols = [cov_jvp(model, x_t, t, np.broadcast_to(e, x_t.shape)) for e in np.eye(D)]
    return np.stack(cols, axis=2)


@dataclass
class TweedieMoments:
    """Posterior mean and covariance operator at one (x_t, t)."""

    x_hat0: np.ndarray
    cov_action: Callable[[np.ndarray], np.ndarray]
    t: float
    schedule: object

    @classmethod
    def at(cls, model, x_t, t):
        x_t = _batch(x_t)
        return cls(denoised_mean(model, x_t, t),
                   lambda v: cov_jvp(model, x_t, t, v), float(t), model.schedule)


def standardized_cumulant(model, x_t, t, n=3):
    """Standardised n-th conditional cumulant of x_0 given x_t, in one dimension.

    k_n(u) = sigma^n * ((sigma/s) * Sigma_hat^{-1/2})^n * d^n/dx^n log p_t(x_t).
    Needs an analytic model exposing ``log_derivatives_1d``; learned models
    are rejected since their higher derivatives are not reliable.
    """
    if not hasattr(model, "log_derivatives_1d"):
        raise TypeError("standardized_cumulant needs an analytic 1-D score oracle")
    if n < 2:
        raise ValueError("n must be >= 2")
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1, 1)
    s, sigma = _coeffs(model, t)
    derivs = model.log_derivatives_1d(x_t, t, max(n, 2))
    var = (sigma**2 / s**2) * (1.0 + sigma**2 * derivs[:, 1])
    if np.any(var <= 0):
        raise FloatingPointError("posterior variance is not positive")
    scale = (sigma / s) / np.sqrt(var)
    return sigma**n * scale**n * derivs[:, n - 1]
