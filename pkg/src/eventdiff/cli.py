"""Command-line entry point: ``eventdiff <command> [--config FILE] [flags]``.

Settings come from a plain ``key=value`` config file, overridden by flags.
Every command writes the resolved configuration beside its outputs in the
same ``key=value`` format, so a run can be repeated with ``--config``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 invariant failure (``verify``).
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import experiments as ex
from .conditioning import ConditionalScore, ConditioningMethod
from .diffusion import NoiseSchedule, SamplerConfig, reverse_sde_sample
from .dynamics import default_system, generate_dataset
from .events import EventSpec, default_event, parse_constraint
from .formats import (atomic_write, read_gmm, read_trajectory_csv, write_sample_csv,
                      write_table, write_trajectory_csv)
from .gmm import GmmScore, gmm_halfspace_prob, gmm_noised, gmm_rejection_sample
from .likelihood import (EstimatorUndefined, FlowLikelihoodConfig, conditional_draws,
                         event_prob_direct, event_prob_importance, event_prob_rate,
                         flow_logdensity)
from .scorenet import (MlpScoreNet, Standardization, TrainConfig, load_checkpoint,
                       save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4

# key -> (type, default); ``None`` defaults are resolved per command and echoed.
KEYS = {
    "system": (str, "lorenz_rescaled"),
    "n": (int, None),
    "n_test": (int, 500),
    "m": (int, 60),
    "seed": (int, 0),
    "sigma_min": (float, 0.01),
    "sigma_max": (float, 50.0),
    "t_min": (float, 1e-3),
    "epochs": (int, 2000),
    "lr": (float, 1e-3),
    "batch": (int, 256),
    "ema_period": (float, None),
    "loss_weighting": (str, "sigma2"),
    "hidden": (str, "256,256,256"),
    "method": (str, "moment"),
    "alpha": (float, 1.0),
    "lambda": (float, 1.0),
    "grad_mode": (str, "frozen"),
    "surrogate": (str, "logistic"),
    "variance_floor": (float, 1e-6),
    "n_steps": (int, 1000),
    "flow_steps": (int, 256),
    "estimator": (str, "all"),
    "n_cond": (int, 16),
    "n_repeats": (int, 5),
    "event": (str, "default"),
    "methods": (str, "moment,naive"),
    "k_prefix": (int, 3),
    "n_samples": (int, None),
    "score_factor": (float, 1.0),
    "truth": (float, None),
    "data": (str, ""),
    "checkpoint": (str, ""),
    "gmm": (str, ""),
    "out": (str, ""),
}

SYSTEM_ALIASES = {"lorenz": "lorenz_rescaled", "fhn": "fitzhugh_nagumo",
                  "pendulum": "double_pendulum"}
GRAD_MODES = {"frozen": "frozen_variance", "frozen_variance": "frozen_variance", "full": "full"}
EXPERIMENTS = ("rollout", "calibration", "calibration-toy", "tail", "convergence", "estimators")
ESTIMATORS = ("rate", "direct", "importance", "all")

# stable labels for splitting the run generator across tasks
STREAMS = {"sample": 1, "condition": 2, "rate": 3, "draws": 4, "train": 5, "experiment": 6}


class UsageError(ValueError):
    pass


class InvariantFailure(RuntimeError):
    pass


def stream(cfg, label):
    return np.random.default_rng([cfg["seed"], STREAMS[label]])


# -- configuration -----------------------------------------------------------

def parse_config_text(text):
    out = {}
    for lineno, ln in enumerate(text.splitlines(), 1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise UsageError(f"config line {lineno}: expected key=value")
        key, val = (p.strip() for p in ln.split("=", 1))
        out[key] = val
    return out


def _cast(key, value):
    if key not in KEYS:
        raise UsageError(f"unknown config key {key!r}")
    kind = KEYS[key][0]
    if value is None or value == "None":
        return None
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"config key {key!r} expects {kind.__name__}, got {value!r}") from None


def resolve_config(config_path, overrides):
    cfg = {k: v[1] for k, v in KEYS.items()}
    if config_path:
        with open(config_path) as fh:
            for k, v in parse_config_text(fh.read()).items():
                cfg[k] = _cast(k, v)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = _cast(k, v)
    cfg["system"] = SYSTEM_ALIASES.get(cfg["system"], cfg["system"])
    cfg["method"] = cfg["method"].replace("-", "_")
    if cfg["grad_mode"] not in GRAD_MODES:
        raise UsageError("grad_mode must be frozen or full")
    if cfg["estimator"] not in ESTIMATORS:
        raise UsageError(f"estimator must be one of {ESTIMATORS}")
    for key in ("n", "n_test", "m", "epochs", "batch", "n_steps", "flow_steps", "n_cond",
                "n_repeats", "k_prefix", "n_samples"):
        if cfg[key] is not None and cfg[key] < 1:
            raise UsageError(f"{key} must be >= 1")
    return cfg


def config_text(cfg):
    return "".join(f"{k}={'None' if cfg[k] is None else cfg[k]}\n" for k in KEYS)


def write_config_beside(path, cfg):
    path = os.fspath(path)
    target = os.path.join(path, "config.txt") if os.path.isdir(path) else path + ".config.txt"
    atomic_write(target, config_text(cfg))


def schedule(cfg):
    return NoiseSchedule(cfg["sigma_min"], cfg["sigma_max"], cfg["t_min"])


def conditioning_method(cfg, name=None):
    return ConditioningMethod(name or cfg["method"], cfg["alpha"], cfg["lambda"],
                              cfg["variance_floor"], GRAD_MODES[cfg["grad_mode"]],
                              cfg["surrogate"])


def require(cfg, *keys):
    for k in keys:
        if not cfg[k]:
            raise UsageError(f"--{k.replace('_', '-')} is required")


# -- model loading -----------------------------------------------------------

class LoadedModel:
    """A score model plus the coordinate information the commands need."""

    def __init__(self, model, dim, m, d, system, standardization=None):
        self.model, self.dim, self.m, self.d = model, dim, m, d
        self.system = system
        self.standardization = standardization

    def to_data(self, z):
        return z if self.standardization is None else self.standardization.inverse(z)

    def to_model(self, x):
        return x if self.standardization is None else self.standardization.forward(x)

    def std_pair(self):
        s = self.standardization
        return None if s is None else (s.mean, s.std)


def load_model(cfg):
    if cfg["gmm"]:
        gmm = read_gmm(cfg["gmm"])
        return LoadedModel(GmmScore(gmm, schedule(cfg)), gmm.dim, 1, gmm.dim, "gmm")
    if cfg["checkpoint"]:
        ck = load_checkpoint(cfg["checkpoint"])
        meta = ck.metadata
        m, d = int(meta.get("m", 1)), int(meta.get("d", ck.net.dim))
        return LoadedModel(ck.model(), ck.net.dim, m, d, meta.get("system", ""),
                           ck.standardization)
    raise UsageError("give --checkpoint or --gmm")


def load_event(cfg, lm: LoadedModel):
    if cfg["event"] == "default":
        if lm.system == "gmm":
            raise UsageError("GMM models need an --event spec file")
        return default_event(lm.system, lm.m, lm.std_pair())
    with open(cfg["event"]) as fh:
        constraint = parse_constraint(fh.read(), lm.m, lm.d, lm.std_pair())
    return EventSpec(constraint, os.path.splitext(os.path.basename(cfg["event"]))[0])


def read_points(path, dim):
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("#"):
        values, _ = read_trajectory_csv(path)
        return values.reshape(values.shape[0], -1)
    pts = np.loadtxt(path, delimiter=",", ndmin=2)
    if pts.shape[1] != dim:
        raise UsageError(f"points have {pts.shape[1]} columns, model dimension is {dim}")
    return pts


def _write_samples(path, lm: LoadedModel, z, cfg, method):
    x = lm.to_data(z).reshape(z.shape[0], lm.m, lm.d)
    write_sample_csv(path, x, lm.system, cfg["seed"], schedule(cfg).t_min, cfg["n_steps"],
                     method)


# -- commands ----------------------------------------------------------------

def cmd_simulate(cfg):
    require(cfg, "out")
    cfg["n"] = cfg["n"] or 4000
    spec = default_system(cfg["system"])
    os.makedirs(cfg["out"], exist_ok=True)
    train_ds = generate_dataset(spec, cfg["n"], cfg["m"], cfg["seed"], "train")
    test_ds = generate_dataset(spec, cfg["n_test"], cfg["m"], cfg["seed"], "test",
                               start_index=cfg["n"])
    for ds, name in ((train_ds, "train.csv"), (test_ds, "test.csv")):
        write_trajectory_csv(os.path.join(cfg["out"], name), ds.values, spec.kind, cfg["seed"],
                             {"split": ds.split})
    write_config_beside(cfg["out"], cfg)
    print(f"wrote {train_ds.n} train and {test_ds.n} test trajectories of shape "
          f"({cfg['m']}, {train_ds.d}) to {cfg['out']}")


def cmd_train(cfg):
    require(cfg, "data", "out")
    values, header = read_trajectory_csv(cfg["data"])
    n, m, d = values.shape
    flat = values.reshape(n, m * d)
    std = Standardization.fit(flat, per_channel=d)
    tcfg = TrainConfig(learning_rate=cfg["lr"], batch_size=cfg["batch"], epochs=cfg["epochs"],
                       ema_period=cfg["ema_period"] or max(cfg["epochs"] / 5.0, 1.0),
                       loss_weighting=cfg["loss_weighting"], seed=cfg["seed"])
    cfg["ema_period"] = tcfg.ema_period
    hidden = [int(h) for h in cfg["hidden"].split(",")]
    net = MlpScoreNet(m * d, hidden, schedule=schedule(cfg), seed=cfg["seed"])
    meta = {"system": header.get("system", ""), "m": m, "d": d,
            "data_seed": header.get("seed", "")}
    every = max(cfg["epochs"] // 20, 1)

    def log(epoch, loss):
        if epoch % every == 0:
            print(f"epoch {epoch} loss {loss:.6g}", file=sys.stderr)

    ck = train(std.forward(flat), net, tcfg, std, log=log, metadata=meta)
    save_checkpoint(ck, cfg["out"])
    write_config_beside(cfg["out"], cfg)
    print(f"final loss {ck.loss_history[-1]:.6g}" if ck.loss_history else "no epochs run")


def cmd_sample(cfg):
    require(cfg, "out")
    cfg["n"] = cfg["n"] or 1000
    lm = load_model(cfg)
    z = reverse_sde_sample(lm.model, lm.model.schedule, SamplerConfig(cfg["n_steps"]),
                           cfg["n"], lm.dim, rng=stream(cfg, "sample"))
    _write_samples(cfg["out"], lm, z, cfg, "unconditional")
    write_config_beside(cfg["out"], cfg)
    print(f"wrote {cfg['n']} samples to {cfg['out']}")


def cmd_condition(cfg):
    require(cfg, "out")
    cfg["n"] = cfg["n"] or 1000
    lm = load_model(cfg)
    event = load_event(cfg, lm)
    meth = conditioning_method(cfg)
    cs = ConditionalScore(lm.model, event, meth)
    z = reverse_sde_sample(cs, lm.model.schedule, SamplerConfig(cfg["n_steps"]), cfg["n"],
                           lm.dim, rng=stream(cfg, "condition"))
    rate = float(np.mean(event.contains(z)))
    _write_samples(cfg["out"], lm, z, cfg, meth.method)
    write_table(cfg["out"] + ".report.csv",
                {"method": [meth.method], "event": [event.name], "n": [cfg["n"]],
                 "satisfaction": [rate], "floor_events": [cs.stats.floor_events]},
                {"grad_mode": meth.gradient_mode, "surrogate": meth.surrogate,
                 "seed": cfg["seed"]})
    write_config_beside(cfg["out"], cfg)
    print(f"method={meth.method} satisfaction={rate:.4f} n={cfg['n']}")


def cmd_loglik(cfg):
    require(cfg, "data", "out")
    lm = load_model(cfg)
    pts = read_points(cfg["data"], lm.dim)
    z = lm.to_model(pts)
    logp = flow_logdensity(lm.model, z, FlowLikelihoodConfig(cfg["flow_steps"]))
    cols = {"index": np.arange(len(pts)), "log_density": logp}
    if lm.standardization is not None:
        # density of the data-space variable: subtract log|det| of the standardisation
        cols["log_density_data"] = logp - np.sum(np.log(lm.standardization.std))
    if isinstance(lm.model, GmmScore):
        cols["analytic"] = gmm_noised(lm.model.gmm, lm.model.schedule.t_min,
                                      lm.model.schedule).logpdf(z)
    write_table(cfg["out"], cols, {"flow_steps": cfg["flow_steps"]})
    write_config_beside(cfg["out"], cfg)
    if "analytic" in cols:
        print(f"max abs error vs analytic {np.max(np.abs(logp - cols['analytic'])):.3e} nats")
    print(f"wrote {len(pts)} log-densities to {cfg['out']}")


def _analytic_truth(lm, event):
    """Exact p(E) for a mixture and a scalar linear inequality, else None."""
    con = event.constraint
    if not isinstance(lm.model, GmmScore) or con.kind != "linear" or con.relation == "equality":
        return None
    if con.r != 1:
        return None
    c, y = con.C[0], float(con.y[0])
    p = gmm_halfspace_prob(lm.model.gmm, c, y)
    return p if con.relation == "greater_than" else 1.0 - p


def cmd_event_prob(cfg):
    require(cfg, "out")
    lm = load_model(cfg)
    event = load_event(cfg, lm)
    rows = []
    wanted = ESTIMATORS[:3] if cfg["estimator"] == "all" else (cfg["estimator"],)
    if "rate" in wanted:
        cfg["n"] = cfg["n"] or 10000
        rows.append(event_prob_rate(lm.model, event, cfg["n"], stream(cfg, "rate"),
                                    SamplerConfig(cfg["n_steps"]), lm.dim).row())
    if "direct" in wanted or "importance" in wanted:
        draws = conditional_draws(lm.model, event, conditioning_method(cfg), cfg["n_cond"],
                                  stream(cfg, "draws"), FlowLikelihoodConfig(cfg["flow_steps"]),
                                  lm.dim)
        if "direct" in wanted:
            rows.append(event_prob_direct(draws).row())
        if "importance" in wanted:
            rows.append(event_prob_importance(draws).row())
    truth = cfg["truth"] if cfg["truth"] is not None else _analytic_truth(lm, event)
    cols = {k: [r[k] for r in rows] for k in ("estimator", "n", "estimate", "std_error")}
    cols["truth"] = [float("nan") if truth is None else truth] * len(rows)
    write_table(cfg["out"], cols, {"event": event.name, "seed": cfg["seed"]})
    write_config_beside(cfg["out"], cfg)
    for r in rows:
        print(f"{r['estimator']}: {r['estimate']:.6g} +- {r['std_error']:.3g}")


def cmd_experiment(cfg, name):
    require(cfg, "out")
    rng_seed = cfg["seed"]
    if name == "convergence":
        gmm = read_gmm(cfg["gmm"]) if cfg["gmm"] else ex.default_convergence_mixture()
        rep = ex.convergence_experiment(gmm, np.ones(gmm.dim) / np.sqrt(gmm.dim),
                                        ex.DEFAULT_T_GRID, sched=schedule(cfg),
                                        k3_points=ex.K3_POINTS, seed=rng_seed)
    elif name == "calibration-toy":
        rep = ex.gaussian_toy_calibration(m=16, n_traj=cfg["n"] or 100,
                                          n_samples=cfg["n_samples"] or 49,
                                          score_factor=cfg["score_factor"],
                                          k_prefix=cfg["k_prefix"], n_steps=cfg["n_steps"],
                                          seed=rng_seed)
    else:
        lm = load_model(cfg)
        if name == "rollout":
            spec = default_system(lm.system)
            test = generate_dataset(spec, cfg["n_test"], lm.m, cfg["seed"], "test",
                                    start_index=cfg["n"] or 4000)
            rep = ex.rollout_error_experiment(lm.model, test, lm.standardization,
                                              cfg["k_prefix"], cfg["n_samples"] or 20,
                                              n_traj=min(10, test.n), n_steps=cfg["n_steps"],
                                              seed=rng_seed, method=conditioning_method(cfg))
        elif name == "calibration":
            require(cfg, "data")
            values, _ = read_trajectory_csv(cfg["data"])
            flat = lm.to_model(values.reshape(values.shape[0], -1))[: cfg["n"] or 20]
            rep = ex.calibration_experiment(lm.model, flat, lm.m, lm.d, cfg["k_prefix"],
                                            cfg["n_samples"] or 49, n_steps=cfg["n_steps"],
                                            seed=rng_seed, method=conditioning_method(cfg))
        elif name == "tail":
            event = load_event(cfg, lm)
            methods = {mname: conditioning_method(cfg, mname.replace("-", "_"))
                       for mname in cfg["methods"].split(",")}
            data = None
            if cfg["data"]:
                values, _ = read_trajectory_csv(cfg["data"])
                data = lm.to_model(values.reshape(values.shape[0], -1))
            reference = None
            if isinstance(lm.model, GmmScore):
                reference, _ = gmm_rejection_sample(lm.model.gmm, event, cfg["n"] or 1000,
                                                    stream(cfg, "experiment"))
            elif data is not None:
                reference = data[event.contains(data)]
            rep = ex.tail_sampling_experiment(lm.model, event, methods, cfg["n"] or 1000,
                                              lm.dim, data, reference, n_steps=cfg["n_steps"],
                                              seed=rng_seed)
        elif name == "estimators":
            event = load_event(cfg, lm)
            truth = cfg["truth"] if cfg["truth"] is not None else _analytic_truth(lm, event)
            rep = ex.estimator_calibration_experiment(
                lm.model, event, cfg["n_repeats"], float("nan") if truth is None else truth,
                lm.dim, n_rate=cfg["n"] or 2000, n_cond=cfg["n_cond"],
                flow_steps=cfg["flow_steps"], n_steps=cfg["n_steps"],
                method=conditioning_method(cfg), seed=rng_seed)
        else:
            raise UsageError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    rep.write(cfg["out"])
    write_config_beside(cfg["out"], cfg)
    for k, v in rep.summary.items():
        print(f"{k}={v}")
    print(f"wrote {cfg['out']} ({rep.wall_clock:.1f} s)")


def cmd_verify(cfg):
    failed = 0
    for name, ok, detail in ex.verify_suite(seed=cfg["seed"]):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    if failed:
        raise InvariantFailure(f"{failed} oracle check(s) failed")


# -- argument parsing --------------------------------------------------------

COMMANDS = {
    "simulate": ("system", "n", "n_test", "m", "seed", "out"),
    "train": ("data", "epochs", "lr", "batch", "ema_period", "loss_weighting", "hidden",
              "seed", "sigma_min", "sigma_max", "t_min", "out"),
    "sample": ("checkpoint", "gmm", "n", "n_steps", "seed", "out"),
    "condition": ("checkpoint", "gmm", "event", "method", "alpha", "lambda", "grad_mode",
                  "surrogate", "variance_floor", "n", "n_steps", "seed", "out"),
    "loglik": ("checkpoint", "gmm", "data", "flow_steps", "out"),
    "event-prob": ("checkpoint", "gmm", "event", "estimator", "method", "grad_mode",
                   "surrogate", "n", "n_cond", "flow_steps", "n_steps", "truth", "seed", "out"),
    "experiment": ("checkpoint", "gmm", "data", "event", "method", "methods", "alpha", "lambda",
                   "grad_mode", "surrogate", "n", "n_test", "n_cond", "n_repeats", "n_samples",
                   "k_prefix", "score_factor", "flow_steps", "n_steps", "truth", "seed", "out"),
    "verify": ("seed",),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="eventdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name)
        if name == "experiment":
            p.add_argument("name", choices=EXPERIMENTS)
        p.add_argument("--config", help="key=value file; flags override it")
        for key in keys:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(args).items()
                 if k in KEYS and v is not None}
    try:
        cfg = resolve_config(args.config, overrides)
        if args.command == "experiment":
            cmd_experiment(cfg, args.name)
        else:
            globals()["cmd_" + args.command.replace("-", "_")](cfg)
    except InvariantFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (FloatingPointError, EstimatorUndefined) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
