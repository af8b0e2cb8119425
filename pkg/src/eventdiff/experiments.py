"""Scripted experiments at desk scale, each producing one CSV table.

Every experiment is a pure function of (model or oracle, config, seed).
Wall-clock time is kept on the report object but out of the CSV, so reruns
produce identical bytes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import tweedie
from .conditioning import ConditionalScore, ConditioningMethod
from .diffusion import NoiseSchedule, SamplerConfig, reverse_sde_sample
from .dynamics import perturbed_baseline, relative_error
from .events import EventSpec, halfspace_event, prefix_constraint
from .formats import write_table
from .gmm import (GmmDistribution, GmmScore, gmm_halfspace_prob, gmm_noised,
                  gmm_rejection_sample)
from .likelihood import (FlowLikelihoodConfig, conditional_draws, event_prob_direct,
                         event_prob_importance, event_prob_rate, flow_logdensity)


@dataclass
class ExperimentReport:
    name: str
    config: dict
    columns: dict
    summary: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def write(self, path):
        comments = [f"{k}={v}" for k, v in self.summary.items()]
        write_table(path, self.columns, {"experiment": self.name, **self.config}, comments)


class ScaledScore:
    """Score model multiplied by a constant; a deliberately miscalibrated control."""

    def __init__(self, model, factor):
        self.model, self.factor = model, float(factor)
        self.schedule = model.schedule
        self.dim = getattr(model, "dim", None)

    def score(self, x, t):
        return self.factor * self.model.score(x, t)

    __call__ = score

    def score_jvp(self, x, t, v):
        return self.factor * self.model.score_jvp(x, t, v)

    def score_vjp(self, x, t, u):
        return self.factor * self.model.score_vjp(x, t, u)


def gaussian_ar1(m, rho=0.9, sched: NoiseSchedule | None = None):
    """Stationary unit-variance AR(1) sequence of length m as a one-component mixture."""
    idx = np.arange(m)
    cov = rho ** np.abs(idx[:, None] - idx[None, :])
    return GmmDistribution.gaussian(np.zeros(m), cov)


def _sample(model, sched, n, dim, seed, n_steps, method=None, event=None):
    score = model if event is None else ConditionalScore(model, event, method)
    return reverse_sde_sample(score, sched, SamplerConfig(n_steps=n_steps, seed=seed), n, dim)


# -- rollout error -----------------------------------------------------------

def rollout_error_experiment(model, dataset, standardization, k_prefix=3, n_samples=20,
                             n_traj=10, eps_std=1e-3, n_steps=1000, seed=0,
                             method: ConditioningMethod | None = None):
    """Per-step relative error of prefix-conditioned samples against held-out truth.

    Columns: single-sample error, pointwise median of ``n_samples`` samples,
    a rerun from a perturbed true start state, and an independent data
    trajectory, each averaged over ``n_traj`` test trajectories.
    """
    start = time.perf_counter()
    method = ConditioningMethod() if method is None else method
    m, d = dataset.m, dataset.d
    D = m * d
    rng = np.random.default_rng(seed)
    picks = rng.choice(dataset.n, size=min(n_traj, dataset.n), replace=False)
    single, median, perturbed, independent = (np.zeros(m) for _ in range(4))
    for j, i in enumerate(picks):
        truth = dataset.values[i]
        z_truth = standardization.forward(truth.reshape(-1)).reshape(m, d)
        event = EventSpec(prefix_constraint(z_truth[:k_prefix], m, d))
        z = _sample(model, model.schedule, n_samples, D, seed + 1 + j, n_steps, method, event)
        samples = standardization.inverse(z).reshape(n_samples, m, d)
        single += relative_error(samples[0], truth)
        median += relative_error(np.median(samples, axis=0), truth)
        base = perturbed_baseline(dataset.system, dataset.start_states[i], eps_std, m, rng)
        perturbed += relative_error(base.values, truth)
        other = dataset.values[(i + 1 + rng.integers(dataset.n - 1)) % dataset.n]
        independent += relative_error(other, truth)
    k = len(picks)
    cols = {"tau_index": np.arange(m), "single": single / k, "median": median / k,
            "perturbed": perturbed / k, "independent": independent / k}
    cfg = {"k_prefix": k_prefix, "n_samples": n_samples, "n_traj": k, "eps_std": eps_std,
           "n_steps": n_steps, "seed": seed, "method": method.method}
    return ExperimentReport("rollout", cfg, cols, wall_clock=time.perf_counter() - start)


# -- calibration -------------------------------------------------------------

def pit_values(samples, truth):
    """Mid-rank PIT (count_below + 0.5) / (n + 1); lies strictly inside (0, 1)."""
    below = np.sum(samples < truth[None, ...], axis=0)
    return (below + 0.5) / (samples.shape[0] + 1)


def central_coverage(pit, levels):
    """Fraction of truths inside the central sample interval of each nominal level."""
    dev = np.abs(pit - 0.5)
    return np.array([np.mean(dev < lvl / 2.0) if lvl < 1 else 1.0 for lvl in levels])


def calibration_experiment(model, test_flat, m, d, k_prefix=3, n_samples=49,
                           levels=None, n_steps=1000, seed=0,
                           method: ConditioningMethod | None = None):
    """Coverage of central sample intervals for the unobserved steps of each test trajectory.

    ``test_flat`` is (n, m*d) in model coordinates.  Reports pooled coverage
    and the spread of per-coordinate coverage across coordinates.
    """
    start = time.perf_counter()
    levels = np.linspace(0.0, 1.0, 11) if levels is None else np.asarray(levels, dtype=float)
    method = ConditioningMethod() if method is None else method
    test_flat = np.atleast_2d(test_flat)
    D = m * d
    pits = []
    for j, truth in enumerate(test_flat):
        event = EventSpec(prefix_constraint(truth.reshape(m, d)[:k_prefix], m, d))
        z = _sample(model, model.schedule, n_samples, D, seed + j, n_steps, method, event)
        pits.append(pit_values(z[:, k_prefix * d:], truth[k_prefix * d:]))
    pits = np.array(pits)  # (n_traj, free coordinates)
    pooled = central_coverage(pits.ravel(), levels)
    per_coord = np.array([central_coverage(pits[:, c], levels) for c in range(pits.shape[1])])
    cols = {"nominal": levels, "coverage_pooled": pooled,
            "coverage_coord_mean": per_coord.mean(axis=0),
            "coverage_coord_min": per_coord.min(axis=0),
            "coverage_coord_max": per_coord.max(axis=0)}
    cfg = {"k_prefix": k_prefix, "n_samples": n_samples, "n_traj": len(test_flat),
           "n_steps": n_steps, "seed": seed, "method": method.method}
    summary = {"max_abs_deviation": float(np.max(np.abs(pooled - levels)))}
    return ExperimentReport("calibration", cfg, cols, summary, time.perf_counter() - start)


def gaussian_toy_calibration(m=16, rho=0.9, n_traj=100, n_samples=49, score_factor=1.0,
                             k_prefix=3, n_steps=500, seed=0):
    """Calibration on an AR(1) Gaussian with its exact score, optionally rescaled."""
    sched = NoiseSchedule()
    gmm = gaussian_ar1(m, rho)
    model = GmmScore(gmm, sched)
    if score_factor != 1.0:
        model = ScaledScore(model, score_factor)
    truth = gmm.sample(n_traj, np.random.default_rng(seed))
    rep = calibration_experiment(model, truth, m, 1, k_prefix, n_samples,
                                 n_steps=n_steps, seed=seed + 1)
    rep.config.update({"toy": "ar1", "rho": rho, "score_factor": score_factor})
    return rep


# -- tail sampling -----------------------------------------------------------

def tail_sampling_experiment(model, event: EventSpec, methods, n, dim, data=None,
                             reference=None, bins=None, n_steps=1000, seed=0):
    """Histograms of the event statistic for data, model and conditional samples.

    ``methods`` maps labels to ConditioningMethod objects.  ``reference``
    holds exact event samples (rejection or filtered data), if available.
    """
    start = time.perf_counter()
    sources = {}
    if data is not None:
        sources["data"] = data
    if reference is not None:
        sources["reference"] = reference
    sources["model"] = _sample(model, model.schedule, n, dim, seed, n_steps)
    rates = {}
    floors = {}
    for j, (label, meth) in enumerate(methods.items()):
        cs = ConditionalScore(model, event, meth)
        sources[label] = reverse_sde_sample(cs, model.schedule,
                                            SamplerConfig(n_steps=n_steps, seed=seed + 1 + j), n, dim)
        floors[label] = cs.stats.floor_events
    values = {k: event.statistic_values(v) for k, v in sources.items()}
    for k, v in sources.items():
        rates[k] = float(np.mean(event.contains(v)))
    if bins is None:
        allv = np.concatenate(list(values.values()))
        bins = np.linspace(np.percentile(allv, 0.5), np.percentile(allv, 99.5), 31)
    cols = {"source": [], "bin_left": [], "bin_right": [], "count": [], "satisfaction": []}
    for k, v in values.items():
        counts, _ = np.histogram(v, bins)
        for b in range(len(counts)):
            cols["source"].append(k)
            cols["bin_left"].append(float(bins[b]))
            cols["bin_right"].append(float(bins[b + 1]))
            cols["count"].append(int(counts[b]))
            cols["satisfaction"].append(rates[k])
    summary = {f"rate_{k}": v for k, v in rates.items()}
    summary.update({f"floor_events_{k}": v for k, v in floors.items()})
    cfg = {"n": n, "n_steps": n_steps, "seed": seed, "event": event.name,
           "methods": ",".join(methods)}
    rep = ExperimentReport("tail_sampling", cfg, cols, summary, time.perf_counter() - start)
    rep.samples = sources
    rep.values = values
    return rep


# -- convergence of the Gaussian approximation ----------------------------------

DEFAULT_T_GRID = (0.9, 0.7, 0.5, 0.3, 0.1)
K3_SIGMAS = (2.0, 1.0, 0.5, 0.25, 0.125)
K3_POINTS = (-1.0, 0.0, 1.0, 2.0)


def default_convergence_mixture():
    """Two broad, well separated components: bimodal at large noise, smooth at small noise."""
    return GmmDistribution([0.3, 0.7], [[-8.0], [8.0]], [[[16.0]], [[16.0]]])


def t_for_sigma(sched: NoiseSchedule, sigma):
    """Invert sigma_t = sigma_min sqrt(r^(2t) - 1) for t."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return np.log1p((sigma / sched.sigma_min) ** 2) / (2.0 * sched.log_ratio)


def convergence_experiment(gmm: GmmDistribution, c, t_grid, n_anchors=20, n_post=2000,
                           sched: NoiseSchedule | None = None, k3_points=None, seed=0):
    """KS distance between p(c^T x0 | x_t) and N(c^T x_hat0, c^T Sigma_hat c), per t.

    Conditional draws are exact posterior samples of the mixture.  For 1-D
    mixtures the standardised third cumulant k3 is reported too, averaged in
    absolute value over ``k3_points`` (fixed x_t locations).
    """
    start = time.perf_counter()
    sched = NoiseSchedule() if sched is None else sched
    model = GmmScore(gmm, sched)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    rows = {"t": [], "sigma_t": [], "k3": [], "gaussian_approx_error": []}
    for t in t_grid:
        t = float(t)
        sigma = float(sched.sigma(t))
        x0 = gmm.sample(n_anchors, rng)
        anchors = x0 + sigma * rng.standard_normal(x0.shape)
        mean = tweedie.denoised_mean(model, anchors, t) @ c
        var = np.einsum("nd,d->n", tweedie.cov_jvp(model, anchors, t, c), c)
        ks = []
        for a in range(n_anchors):
            post = model.posterior_sample(anchors[a], t, n_post, rng) @ c
            ks.append(sps.kstest(post, "norm", args=(mean[a], np.sqrt(var[a]))).statistic)
        if gmm.dim == 1:
            pts = np.zeros((1, 1)) if k3_points is None else np.asarray(k3_points).reshape(-1, 1)
            k3 = float(np.mean(np.abs(tweedie.standardized_cumulant(model, pts, t, 3))))
        else:
            k3 = float("nan")
        rows["t"].append(t)
        rows["sigma_t"].append(sigma)
        rows["k3"].append(k3)
        rows["gaussian_approx_error"].append(float(np.mean(ks)))
    cols = {k: np.array(v) for k, v in rows.items()}
    cfg = {"n_anchors": n_anchors, "n_post": n_post, "seed": seed, "K": gmm.K, "d": gmm.dim}
    return ExperimentReport("convergence", cfg, cols, wall_clock=time.perf_counter() - start)


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# -- estimator calibration ----------------------------------------------------

def estimator_calibration_experiment(model, event: EventSpec, n_repeats, truth, dim,
                                     n_rate=2000, n_cond=16, flow_steps=256, n_steps=1000,
                                     method: ConditioningMethod | None = None, seed=0):
    """Rate, direct and importance estimates of p(E) across independent repeats."""
    start = time.perf_counter()
    cols = {"repeat": [], "rate": [], "rate_se": [], "direct": [], "direct_se": [],
            "importance": [], "importance_se": [], "truth": []}
    fcfg = FlowLikelihoodConfig(flow_steps)
    for r in range(n_repeats):
        rng = np.random.default_rng([seed, r])
        rate = event_prob_rate(model, event, n_rate, rng, SamplerConfig(n_steps=n_steps), dim)
        draws = conditional_draws(model, event, method, n_cond, rng, fcfg, dim)
        direct = event_prob_direct(draws)
        imp = event_prob_importance(draws)
        for key, res in (("rate", rate), ("direct", direct), ("importance", imp)):
            cols[key].append(res.estimate)
            cols[key + "_se"].append(res.std_error)
        cols["repeat"].append(r)
        cols["truth"].append(truth)
    cols = {k: np.array(v) for k, v in cols.items()}
    summary = {f"median_{k}": float(np.median(cols[k])) for k in ("rate", "direct", "importance")}
    cfg = {"n_repeats": n_repeats, "n_rate": n_rate, "n_cond": n_cond,
           "flow_steps": flow_steps, "seed": seed, "event": event.name}
    return ExperimentReport("estimator_calibration", cfg, cols, summary,
                            time.perf_counter() - start)


# -- oracle verification suite ------------------------------------------------

def random_gmm(rng, d, K, spread=2.0):
    A = rng.standard_normal((K, d, d))
    covs = A @ np.swapaxes(A, 1, 2) / d + 0.2 * np.eye(d)
    return GmmDistribution(rng.dirichlet(np.ones(K)), spread * rng.standard_normal((K, d)), covs)


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def verify_suite(seed=0, quick=False):
    """Oracle checks on random mixtures; returns a list of (name, passed, detail)."""
    rng = np.random.default_rng(seed)
    sched = NoiseSchedule()
    results = []

    worst_mean = worst_cov = worst_sym = worst_jvp = 0.0
    n_gmm, n_pts = (4, 10) if quick else (10, 50)
    for i in range(n_gmm):
        d, K = (1, 2, 3)[i % 3], (1, 2, 4)[i % 3]
        gmm = random_gmm(rng, d, K)
        model = GmmScore(gmm, sched)
        for _ in range(n_pts):
            t = rng.uniform(sched.t_min, 1.0)
            x = gmm.sample(1, rng) + float(sched.sigma(t)) * rng.standard_normal((1, d))
            mean, cov = model.posterior_moments(x, t)
            worst_mean = max(worst_mean, _rel(tweedie.denoised_mean(model, x, t), mean))
            worst_cov = max(worst_cov, _rel(tweedie.dense_cov(model, x, t), cov))
            H = model.hessian(x, t)[0]
            worst_sym = max(worst_sym, float(np.max(np.abs(H - H.T))))
            v = rng.standard_normal((1, d))
            h = 1e-5 * (1.0 + np.linalg.norm(x))
            fd = (model.score(x + h * v, t) - model.score(x - h * v, t)) / (2 * h)
            worst_jvp = max(worst_jvp, _rel(model.score_jvp(x, t, v), fd))
    results.append(("tweedie_mean", bool(worst_mean < 1e-8), f"max rel err {worst_mean:.2e}"))
    results.append(("tweedie_cov", bool(worst_cov < 1e-8), f"max rel err {worst_cov:.2e}"))
    results.append(("hessian_symmetric", bool(worst_sym < 1e-10), f"max asym {worst_sym:.2e}"))
    results.append(("score_jvp_fd", bool(worst_jvp < 1e-6), f"max rel err {worst_jvp:.2e}"))

    gmm = GmmDistribution([0.6, 0.4], [[-1.0], [2.0]], [[[0.5]], [[1.0]]])
    y = 3.0
    p = gmm_halfspace_prob(gmm, [1.0], y)
    n_mc = 200_000 if quick else 1_000_000
    hits = np.mean(gmm.sample(n_mc, rng)[:, 0] > y)
    se = np.sqrt(p * (1 - p) / n_mc)
    results.append(("halfspace_vs_mc", bool(abs(hits - p) < 3.5 * se), f"p={p:.5f} mc={hits:.5f}"))

    ev = halfspace_event([1.0], y)
    draws, rate = gmm_rejection_sample(gmm, ev, 2000, rng)
    se = np.sqrt(p * (1 - p) / (2000 / max(rate, 1e-12)))
    ok = bool(np.all(draws[:, 0] > y)) and abs(rate - p) < 4 * se + 1e-3
    results.append(("rejection_rate", bool(ok), f"rate={rate:.5f}"))

    far = np.array([[1e3]])
    model = GmmScore(gmm, sched)
    finite = all(np.all(np.isfinite(model.score(far * s, 0.01))) for s in (1.0, -1.0))
    results.append(("far_tail_finite", bool(finite), "score finite at |x| = 1e3"))

    xs = np.linspace(-3.0, 4.0, 400)
    t = 0.2
    sc = model.score(xs[:, None], t)[:, 0]
    integral = np.trapezoid(sc, xs)
    delta = model.logpdf(xs[-1:, None], t)[0] - model.logpdf(xs[:1, None], t)[0]
    results.append(("score_line_integral", bool(abs(integral - delta) < 1e-3),
                    f"integral={integral:.6f} logp diff={delta:.6f}"))

    std = GmmDistribution([0.5, 0.5], [[-0.8], [0.8]], [[[0.36]], [[0.36]]])
    m2 = GmmScore(std, sched)
    pts = np.linspace(-2.0, 2.0, 9)[:, None]
    err = np.max(np.abs(flow_logdensity(m2, pts, FlowLikelihoodConfig(256))
                        - gmm_noised(std, sched.t_min, sched).logpdf(pts)))
    results.append(("flow_logdensity", bool(err < 1e-2), f"max abs err {err:.2e} nats"))
    return results
