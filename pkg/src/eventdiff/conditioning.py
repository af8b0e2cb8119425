"""Conditional scores grad log p(x_t | E) for equality and inequality events.

Every method adds an event term to the unconditional score.  The event term
is the gradient of an approximate log p(E | x_t) built from the denoised mean
x_hat0 and, for the moment method, the Tweedie covariance operator.

Methods
-------
moment      N(C(x_hat0), grad C Sigma_hat grad C^T), the default
naive       variance (sigma/s)^2, ignoring the Tweedie covariance
crude       (sigma/s)^2 grad C grad C^T
diag        lambda (sigma/s)^2 I
lambda_iso  Hessian replaced by lambda I / sigma^2 (closed form)
mcg         s - alpha grad ||C x_hat0 - y||^2
projection  subspace split for linear equalities with an exact known block
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from . import tweedie
from .events import ConstraintSpec, EventSpec, linear_constraint, nonlinear_constraint

METHODS = ("moment", "naive", "crude", "diag", "lambda_iso", "mcg", "projection")
GRADIENT_MODES = ("frozen_variance", "full")
SURROGATES = ("logistic", "exact")
LOGIT_SCALE = 1.6
Z_CLAMP = 50.0


class MethodMismatch(ValueError):
    """Raised when a method cannot handle the given constraint class."""


@dataclass(frozen=True)
class ConditioningMethod:
    method: str = "moment"
    alpha: float = 1.0
    lam: float = 1.0
    variance_floor: float = 1e-6
    gradient_mode: str = "frozen_variance"
    surrogate: str = "logistic"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"surrogate must be one of {SURROGATES}")
        if self.alpha <= 0 or self.lam <= 0 or self.variance_floor <= 0:
            raise ValueError("alpha, lam and variance_floor must be positive")


def dlogcdf(z, surrogate="logistic"):
    """d/dz log Phi(z), either exact or with Phi(z) ~ logistic(1.6 z)."""
    z = np.clip(z, -Z_CLAMP, Z_CLAMP)
    if surrogate == "logistic":
        # 1.6 * (1 - logistic(1.6 z)) = 1.6 * logistic(-1.6 z)
        return LOGIT_SCALE * np.exp(-np.logaddexp(0.0, LOGIT_SCALE * z))
    log_pdf = -0.5 * z * z - 0.5 * np.log(2.0 * np.pi)
    return np.exp(log_pdf - log_ndtr(z))


def logcdf(z, surrogate="logistic"):
    z = np.clip(z, -Z_CLAMP, Z_CLAMP)
    if surrogate == "logistic":
        return -np.logaddexp(0.0, -LOGIT_SCALE * z)
    return log_ndtr(z)


@dataclass
class SubspaceDecomp:
    """Orthonormal split of R^D into the constraint row space Q and its complement P."""

    Q: np.ndarray
    P: np.ndarray
    u0: np.ndarray

    @classmethod
    def from_constraint(cls, C, y):
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        r, D = C.shape
        U, sv, Vt = np.linalg.svd(C, full_matrices=True)
        Q, P = Vt[:r].T, Vt[r:].T
        u0 = (U.T @ np.asarray(y, dtype=np.float64)) / sv
        return cls(Q, P, u0)


class _Stats:
    def __init__(self):
        self.floor_events = 0
        self.evaluations = 0


class ConditionalScore:
    """Score model of p(x_t | E) assembled from an unconditional score model.

    Exposes the same interface as the wrapped model (``score``,
    ``score_jvp``, ``schedule``), so it plugs into the samplers and into the
    flow likelihood.  The event term's Jacobian is taken by central finite
    differences.  ``stats.floor_events`` counts floored covariance
    eigenvalues.
    """

    exact = False

    def __init__(self, model, event, method: ConditioningMethod | None = None):
        self.model = model
        self.constraint: ConstraintSpec = event.constraint if isinstance(event, EventSpec) else event
        self.method = ConditioningMethod() if method is None else method
        self.schedule = model.schedule
        self.stats = _Stats()
        c = self.constraint
        if self.method.method == "projection":
            if c.kind != "linear" or c.relation != "equality":
                raise MethodMismatch("projection needs linear equality constraints")
            self.decomp = SubspaceDecomp.from_constraint(c.C, c.y)
        if c.relation == "greater_than" and self.method.method in ("mcg", "lambda_iso"):
            raise MethodMismatch(f"{self.method.method} is defined for equality constraints only")

    @property
    def dim(self):
        return getattr(self.model, "dim", None)

    # -- public interface -------------------------------------------------
    def score(self, x, t):
        x = _batch(x)
        base = self.model.score(x, t)
        if self.method.method == "projection":
            return self._projection(x, t, base)
        return base + self._event_term(x, t, base)

    __call__ = score

    def event_term(self, x, t):
        x = _batch(x)
        base = self.model.score(x, t)
        if self.method.method == "projection":
            return self._projection(x, t, base) - base
        return self._event_term(x, t, base)

    def score_jvp(self, x, t, v):
        x = _batch(x)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        vnorm = np.linalg.norm(v, axis=1, keepdims=True)
        h = 1e-4 * (1.0 + np.linalg.norm(x, axis=1, keepdims=True)) / np.maximum(vnorm, 1.0)
        fd = (self.event_term(x + h * v, t) - self.event_term(x - h * v, t)) / (2.0 * h)
        return self.model.score_jvp(x, t, v) + fd

    score_vjp = None  # the event term's Jacobian is not symmetric in general

    # -- shared pieces ----------------------------------------------------
    def _coeffs(self, t):
        return float(self.schedule.s(t)), float(self.schedule.sigma(t))

    def _linearise(self, x, t, base):
        s, sigma = self._coeffs(t)
        x_hat = (x + sigma**2 * base) / s
        values, grads = self.constraint.evaluate(x_hat)
        return x_hat, values, np.ascontiguousarray(grads)

    def _pull_back(self, x, t, u):
        """(d x_hat0 / d x_t)^T u."""
        return tweedie.mean_jacobian_t(self.model, x, t, u)

    def _gamma(self, x, t, grads):
        """r x r covariance of C(x_0) | x_t under the chosen method, floored."""
        n, r, D = grads.shape
        s, sigma = self._coeffs(t)
        base_var = (sigma / s) ** 2
        meth = self.method.method
        if meth == "moment":
            cols = [tweedie.cov_jvp(self.model, x, t, grads[:, j, :]) for j in range(r)]
            sg = np.stack(cols, axis=1)  # (n, r, D): Sigma_hat g_j
            gamma = np.einsum("nid,njd->nij", grads, sg)
            gamma = 0.5 * (gamma + np.swapaxes(gamma, 1, 2))
        elif meth == "crude":
            gamma = base_var * np.einsum("nid,njd->nij", grads, grads)
        elif meth == "naive":
            gamma = np.broadcast_to(base_var * np.eye(r), (n, r, r)).copy()
        elif meth == "diag":
            gamma = np.broadcast_to(self.method.lam * base_var * np.eye(r), (n, r, r)).copy()
        else:
            raise AssertionError(meth)
        rowscale = np.max(np.einsum("nid,nid->ni", grads, grads), axis=1)
        floor = self.method.variance_floor * base_var * np.maximum(rowscale, 1e-300)
        return self._floor(gamma, floor)

    def _floor(self, gamma, floor):
        if gamma.shape[1] == 1:
            low = gamma[:, 0, 0] < floor
            if np.any(low):
                self.stats.floor_events += int(low.sum())
                gamma = gamma.copy()
                gamma[low, 0, 0] = floor[low]
            return gamma
        w, V = np.linalg.eigh(gamma)
        low = w < floor[:, None]
        if np.any(low):
            self.stats.floor_events += int(low.sum())
            w = np.maximum(w, floor[:, None])
            gamma = np.einsum("nij,nj,nkj->nik", V, w, V)
        return gamma

    def _log_event_prob(self, res, gamma):
        """log p(E | x_t) given residual C(x_hat0) - y and covariance gamma."""
        if self.constraint.relation == "greater_than":
            z = res[:, 0] / np.sqrt(gamma[:, 0, 0])
            return logcdf(z, self.method.surrogate)
        sol = np.linalg.solve(gamma, res[:, :, None])[:, :, 0]
        _, logdet = np.linalg.slogdet(gamma)
        return -0.5 * np.einsum("ni,ni->n", res, sol) - 0.5 * logdet

    # -- method implementations --------------------------------------------
    def _event_term(self, x, t, base):
        c = self.constraint
        self.stats.evaluations += 1
        if c.kind == "none":
            return np.zeros_like(x)
        meth = self.method.method
        s, sigma = self._coeffs(t)
        x_hat, values, grads = self._linearise(x, t, base)
        res = values - c.y  # C(x_hat0) - y
        if meth == "mcg":
            u = -2.0 * self.method.alpha * np.einsum("nid,ni->nd", grads, res)
            return self._pull_back(x, t, u)
        if meth == "lambda_iso":
            coef = s**2 / ((1.0 + self.method.lam) * sigma**2)
            u = -coef * np.einsum("nid,ni->nd", grads, res)
            return self._pull_back(x, t, u)
        gamma = self._gamma(x, t, grads)
        if c.relation == "greater_than":
            sd = np.sqrt(gamma[:, 0, 0])
            z = res[:, 0] / sd
            coef = dlogcdf(z, self.method.surrogate) / sd
            u = coef[:, None] * grads[:, 0, :]
        else:
            sol = np.linalg.solve(gamma, -res[:, :, None])[:, :, 0]
            u = np.einsum("nid,ni->nd", grads, sol)
        term = self._pull_back(x, t, u)
        if self.method.gradient_mode == "full" and meth in ("moment", "crude"):
            term = term + self._covariance_term(x, t, res)
        return term

    def _covariance_term(self, x, t, res):
        """Gradient of log p(E | x_t) through the covariance alone, by central differences."""
        n, D = x.shape
        out = np.zeros_like(x)
        h = 1e-5 * (1.0 + np.linalg.norm(x, axis=1))
        for i in range(D):
            step = np.zeros_like(x)
            step[:, i] = h
            vals = []
            for sign in (1.0, -1.0):
                xp = x + sign * step
                _, _, g = self._linearise(xp, t, self.model.score(xp, t))
                floors_before = self.stats.floor_events
                gam = self._gamma(xp, t, g)
                self.stats.floor_events = floors_before
                vals.append(self._log_event_prob(res, gam))
            out[:, i] = (vals[0] - vals[1]) / (2.0 * h)
        return out

    def _projection(self, x, t, base):
        s, sigma = self._coeffs(t)
        Q, P, u0 = self.decomp.Q, self.decomp.P, self.decomp.u0
        term1 = (s * u0[None, :] - x @ Q) @ Q.T / sigma**2
        if P.shape[1] == 0:
            return term1
        x_hat = (x + sigma**2 * base) / s
        u = -2.0 * self.method.alpha * ((x_hat @ Q - u0[None, :]) @ Q.T)
        inner = base + self._pull_back(x, t, u)
        return term1 + (inner @ P) @ P.T

    def log_event_prob(self, x, t):
        """The approximate log p(E | x_t) whose gradient the event term follows."""
        x = _batch(x)
        base = self.model.score(x, t)
        _, values, grads = self._linearise(x, t, base)
        return self._log_event_prob(values - self.constraint.y, self._gamma(x, t, grads))


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def conditional_score(model, event, method, x_t, t):
    return ConditionalScore(model, event, method).score(x_t, t)


def linear_eq_grad(model, C, y, x_t, t, method: ConditioningMethod | None = None):
    cs = ConditionalScore(model, linear_constraint(C, y), method)
    return cs.event_term(x_t, t)


def nonlinear_eq_grad(model, statistic, y, x_t, t, method: ConditioningMethod | None = None):
    cs = ConditionalScore(model, nonlinear_constraint(statistic, y, "equality"), method)
    return cs.event_term(x_t, t)


def inequality_grad(model, constraint, x_t, t, method: ConditioningMethod | None = None):
    return ConditionalScore(model, constraint, method).event_term(x_t, t)


def naive_inequality_grad(model, constraint, x_t, t):
    return ConditionalScore(model, constraint, ConditioningMethod("naive")).event_term(x_t, t)


def projection_linear_score(model, decomp: SubspaceDecomp, alpha, x_t, t):
    C = decomp.Q.T
    cs = ConditionalScore(model, linear_constraint(C, decomp.u0),
                          ConditioningMethod("projection", alpha=alpha))
    return cs.score(x_t, t)
