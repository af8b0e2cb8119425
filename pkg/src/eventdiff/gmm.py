"""Gaussian mixtures as exactly solvable data distributions.

Under the noising kernel a mixture stays a mixture, so the noised score, its
Hessian, the exact posterior p(x_0 | x_t) and half-space probabilities all
have closed forms.  These serve as ground truth for every approximation in
the package.  All mixture arithmetic runs in log space with a single max
shift, so points far in the tails stay finite.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr

from .diffusion import NoiseSchedule

LOG_2PI = float(np.log(2.0 * np.pi))


class RareEventBudgetExceeded(RuntimeError):
    def __init__(self, accepted, requested, draws):
        self.accepted = accepted
        self.draws = draws
        self.rate = accepted / max(draws, 1)
        super().__init__(f"rejection sampling budget exhausted: {accepted}/{requested} "
                         f"accepted after {draws} draws (rate {self.rate:.3g})")


@dataclass
class GmmDistribution:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        K, d = self.means.shape
        covs = np.asarray(self.covariances, dtype=np.float64)
        if covs.ndim == 1 and d == 1:
            covs = covs.reshape(K, 1, 1)
        self.covariances = covs
        if self.weights.shape != (K,) or covs.shape != (K, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        try:
            self.chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError:
            raise ValueError("covariances must be positive definite") from None

    @property
    def K(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.asarray(cov, dtype=np.float64).reshape(mean.size, mean.size)
        return cls(np.ones(1), mean[None, :], cov[None])

    def mean(self):
        return self.weights @ self.means

    def covariance(self):
        mu = self.mean()
        dev = self.means - mu
        return (np.einsum("k,kij->ij", self.weights, self.covariances)
                + np.einsum("k,ki,kj->ij", self.weights, dev, dev))

    def sample(self, n, rng, return_labels=False):
        labels = rng.choice(self.K, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.einsum("nij,nj->ni", self.chol[labels], z)
        return (x, labels) if return_labels else x

    def logpdf(self, x):
        return _MixtureTerms(self, _as_batch(x)).logpdf


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


class _MixtureTerms:
    """Per-component quantities of a mixture evaluated at a batch of points."""

    def __init__(self, gmm: GmmDistribution, x):
        self.inv = np.linalg.inv(gmm.covariances)
        self.inv = 0.5 * (self.inv + np.swapaxes(self.inv, 1, 2))
        logdet = 2.0 * np.log(np.diagonal(gmm.chol, axis1=1, axis2=2)).sum(axis=1)
        diff = gmm.means[None, :, :] - x[:, None, :]  # (n, K, D)
        # m_k = Sigma_k^{-1} (mu_k - x): the per-component score
        self.m = np.einsum("kij,nkj->nki", self.inv, diff)
        quad = np.einsum("nki,nki->nk", diff, self.m)
        log_comp = np.log(gmm.weights) - 0.5 * (quad + logdet + gmm.dim * LOG_2PI)
        norm = logsumexp(log_comp, axis=1)
        if not np.all(np.isfinite(norm)):
            raise FloatingPointError("mixture density underflowed for every component")
        self.logpdf = norm
        self.resp = np.exp(log_comp - norm[:, None])
        self.score = np.einsum("nk,nki->ni", self.resp, self.m)

    def hvp(self, v):
        """Hessian of log p applied to v (n, D)."""
        mv = np.einsum("nki,ni->nk", self.m, v)
        av = -np.einsum("kij,nj->nki", self.inv, v)
        term = np.einsum("nk,nki->ni", self.resp, av + self.m * mv[:, :, None])
        return term - self.score * np.einsum("ni,ni->n", self.score, v)[:, None]

    def hessian(self):
        outer = np.einsum("nki,nkj->nkij", self.m, self.m)
        h = np.einsum("nk,nkij->nij", self.resp, outer - self.inv[None])
        return h - np.einsum("ni,nj->nij", self.score, self.score)


def gmm_noised(gmm: GmmDistribution, t, sched: NoiseSchedule) -> GmmDistribution:
    """Marginal of x_t: means s_t mu_k, covariances s_t^2 Sigma_k + sigma_t^2 I."""
    s, sigma = float(sched.s(t)), float(sched.sigma(t))
    covs = s**2 * gmm.covariances + sigma**2 * np.eye(gmm.dim)[None]
    return GmmDistribution(gmm.weights.copy(), s * gmm.means, covs)


class GmmScore:
    """Exact score model of a noised Gaussian mixture.

    Implements the score-model interface used throughout the package:
    ``score(x, t)``, ``score_jvp(x, t, v)`` and ``score_vjp(x, t, v)`` on
    batches ``x`` of shape (n, D) with scalar ``t``.
    """

    exact = True

    def __init__(self, gmm: GmmDistribution, sched: NoiseSchedule | None = None):
        self.gmm = gmm
        self.schedule = NoiseSchedule() if sched is None else sched
        self._cache_t = None
        self._cache = None

    @property
    def dim(self):
        return self.gmm.dim

    def noised(self, t):
        t = float(t)
        if t != self._cache_t:
            self._cache = gmm_noised(self.gmm, t, self.schedule)
            self._cache_t = t
        return self._cache

    def _terms(self, x, t):
        return _MixtureTerms(self.noised(t), _as_batch(x))

    def score(self, x, t):
        return self._terms(x, t).score

    def __call__(self, x, t):
        return self.score(x, t)

    def score_jvp(self, x, t, v):
        x = _as_batch(x)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        return self._terms(x, t).hvp(v)

    # The Hessian of a log density is symmetric.
    score_vjp = score_jvp

    def hessian(self, x, t):
        return self._terms(x, t).hessian()

    def logpdf(self, x, t=0.0):
        if t == 0.0:
            return self.gmm.logpdf(x)
        return self._terms(x, t).logpdf

    def posterior_components(self, x, t):
        """Responsibilities, means (n, K, D) and covariances (K, D, D) of p(x_0 | x_t)."""
        x = _as_batch(x)
        s, sigma = float(self.schedule.s(t)), float(self.schedule.sigma(t))
        noised = self.noised(t)
        terms = _MixtureTerms(noised, x)
        gmm = self.gmm
        # gain s Sigma_k S_k^{-1}; posterior covariance sigma^2 Sigma_k S_k^{-1}
        sig_sinv = np.einsum("kij,kjl->kil", gmm.covariances, terms.inv)
        resid = x[:, None, :] - s * gmm.means[None]
        means = gmm.means[None] + s * np.einsum("kij,nkj->nki", sig_sinv, resid)
        covs = sigma**2 * sig_sinv
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        return terms.resp, means, covs

    def posterior_moments(self, x, t):
        resp, means, covs = self.posterior_components(x, t)
        mean = np.einsum("nk,nki->ni", resp, means)
        dev = means - mean[:, None, :]
        cov = (np.einsum("nk,kij->nij", resp, covs)
               + np.einsum("nk,nki,nkj->nij", resp, dev, dev))
        return mean, cov

    def posterior_sample(self, x, t, n, rng):
        """Exact draws from p(x_0 | x_t) for a single point ``x``."""
        resp, means, covs = self.posterior_components(_as_batch(x)[:1], t)
        labels = rng.choice(self.gmm.K, size=n, p=resp[0] / resp[0].sum())
        chol = np.linalg.cholesky(covs + 1e-300 * np.eye(self.dim))
        z = rng.standard_normal((n, self.dim))
        return means[0, labels] + np.einsum("nij,nj->ni", chol[labels], z)

    def log_derivatives_1d(self, x, t, order):
        """d^j/dx^j log p_t(x) for j = 1..order, for a 1-D mixture.

        Uses the Gaussian Hermite identities for p^(j)/p and converts these
        moment-like ratios to log-derivatives with the moment-cumulant
        recursion.  Returns shape (n, order).
        """
        if self.dim != 1:
            raise ValueError("log_derivatives_1d needs a 1-D mixture")
        x = _as_batch(x)[:, 0]
        noised = self.noised(t)
        var = noised.covariances[:, 0, 0]
        sd = np.sqrt(var)
        terms = _MixtureTerms(noised, x[:, None])
        u = (x[:, None] - noised.means[None, :, 0]) / sd[None]
        # probabilists' Hermite polynomials He_j(u)
        he = [np.ones_like(u), u]
        for j in range(1, order):
            he.append(u * he[j] - j * he[j - 1])
        ratios = [np.einsum("nk,nk->n", terms.resp, (-1) ** j * he[j] / sd[None] ** j)
                  for j in range(order + 1)]
        kappa = [0.0] * (order + 1)
        for j in range(1, order + 1):
            acc = ratios[j]
            for i in range(1, j):
                acc = acc - comb(j - 1, i - 1) * kappa[i] * ratios[j - i]
            kappa[j] = acc
        return np.stack(kappa[1:], axis=1)


def gmm_score(gmm, x, t, sched):
    return GmmScore(gmm, sched).score(x, t)


def gmm_score_jvp(gmm, x, t, v, sched):
    return GmmScore(gmm, sched).score_jvp(x, t, v)


def gmm_posterior_moments(gmm, x_t, t, sched):
    """Exact E[x_0 | x_t] and Cov[x_0 | x_t] by direct Bayesian computation."""
    return GmmScore(gmm, sched).posterior_moments(x_t, t)


def gmm_halfspace_prob(gmm: GmmDistribution, c, y):
    """P(c^T x > y) = sum_k w_k Phi((c^T mu_k - y) / sqrt(c^T Sigma_k c))."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if not np.any(c):
        raise ValueError("c must be nonzero")
    mu = gmm.means @ c
    sd = np.sqrt(np.einsum("i,kij,j->k", c, gmm.covariances, c))
    return float(np.clip(gmm.weights @ ndtr((mu - y) / sd), 0.0, 1.0))


def gmm_halfspace_logprob(gmm: GmmDistribution, c, y):
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    mu = gmm.means @ c
    sd = np.sqrt(np.einsum("i,kij,j->k", c, gmm.covariances, c))
    return float(logsumexp(np.log(gmm.weights) + log_ndtr((mu - y) / sd)))


def gmm_rejection_sample(gmm: GmmDistribution, event, n, rng, max_draws=10_000_000):
    """Exact i.i.d. draws from p(x | E) by rejection; returns (samples, acceptance_rate).

    ``event`` needs a ``contains(x) -> bool array`` method.
    """
    accepted, draws = [], 0
    count = 0
    batch = max(1024, 2 * n)
    while count < n:
        if draws >= max_draws:
            raise RareEventBudgetExceeded(count, n, draws)
        size = min(batch, max_draws - draws)
        x = gmm.sample(size, rng)
        draws += size
        keep = x[event.contains(x)]
        accepted.append(keep)
        count += keep.shape[0]
        rate = count / draws
        if 0 < rate:
            batch = int(min(max(1024, 1.2 * (n - count) / rate), 2_000_000))
    samples = np.concatenate(accepted)[:n]
    return samples, count / draws
