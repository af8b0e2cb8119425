"""Event statistics C(x) with analytic gradients, and constraint specs.

Trajectories are handled as flat vectors of length m*d in time-major order,
so coordinate ``tau * d + c`` is channel ``c`` at step ``tau``.  All
statistics are batched: they take (n, m*d) arrays and return values (n,)
and gradients (n, m*d).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax


class UnknownStatistic(ValueError):
    pass


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


class Statistic:
    """Scalar differentiable functional of a flat state vector."""

    name = "statistic"

    def value_and_grad(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.value_and_grad(x)[0]

    def params(self):
        return {}


class LinearStatistic(Statistic):
    name = "linear"

    def __init__(self, c, offset=0.0):
        self.c = np.asarray(c, dtype=np.float64).reshape(-1)
        self.offset = float(offset)

    def value_and_grad(self, x):
        x = _batch(x)
        # same product shape as the linear-constraint path so both agree bitwise
        value = (x @ self.c[None, :].T)[:, 0] - self.offset
        return value, np.broadcast_to(self.c, x.shape).copy()


class QuadraticStatistic(Statistic):
    """0.5 x^T A x + b^T x with symmetric A."""

    name = "quadratic"

    def __init__(self, A, b=None):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.A = 0.5 * (A + A.T)
        self.b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=np.float64)

    def value_and_grad(self, x):
        x = _batch(x)
        Ax = x @ self.A
        return 0.5 * np.einsum("ni,ni->n", x, Ax) + x @ self.b, Ax + self.b


class FhnSpike(Statistic):
    """max over tau of the mean of the two voltage channels, minus a threshold.

    ``temperature = 0`` uses the hard max with the subgradient placed at the
    first maximiser; a positive temperature replaces the max with
    ``T * logsumexp(v / T)``, which exceeds the hard max by at most T log m.
    """

    name = "fhn_spike"

    def __init__(self, m, threshold=2.5, temperature=0.0, channels=(0, 2), d=4):
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        self.m, self.d = int(m), int(d)
        self.threshold = float(threshold)
        self.temperature = float(temperature)
        self.channels = tuple(channels)

    def params(self):
        return {"threshold": self.threshold}

    def value_and_grad(self, x):
        x = _batch(x)
        if x.shape[1] != self.m * self.d:
            raise ValueError(f"fhn_spike expects {self.m}x{self.d} trajectories")
        traj = x.reshape(-1, self.m, self.d)
        v = 0.5 * (traj[:, :, self.channels[0]] + traj[:, :, self.channels[1]])
        if self.temperature > 0:
            T = self.temperature
            value = T * logsumexp(v / T, axis=1)
            weights = softmax(v / T, axis=1)
        else:
            idx = np.argmax(v, axis=1)  # first maximiser on ties
            value = v[np.arange(v.shape[0]), idx]
            weights = np.zeros_like(v)
            weights[np.arange(v.shape[0]), idx] = 1.0
        grad = np.zeros_like(traj)
        grad[:, :, self.channels[0]] = 0.5 * weights
        grad[:, :, self.channels[1]] = 0.5 * weights
        return value - self.threshold, grad.reshape(x.shape)


class LorenzArm(Statistic):
    """level - norm * sum_{c,k} |DFT_k(x_c - mean_tau x_c)|.

    The DFT is the plain O(m^2) sum with ``norm`` applied afterwards (1/m by
    default).  ``magnitude="realimag"`` sums |Re| + |Im| instead of complex
    moduli.  At a zero coefficient the subgradient 0 is used.
    """

    name = "lorenz_arm"

    def __init__(self, m, level=0.6, norm=None, magnitude="complex", d=3):
        if magnitude not in ("complex", "realimag"):
            raise ValueError("magnitude must be 'complex' or 'realimag'")
        self.m, self.d = int(m), int(d)
        self.level = float(level)
        self.norm = 1.0 / self.m if norm is None else float(norm)
        self.magnitude = magnitude
        k = np.arange(self.m)
        self.W = np.exp(-2j * np.pi * np.outer(k, k) / self.m)  # W[k, tau]

    def params(self):
        return {"level": self.level}

    def value_and_grad(self, x):
        x = _batch(x)
        if x.shape[1] != self.m * self.d:
            raise ValueError(f"lorenz_arm expects {self.m}x{self.d} trajectories")
        traj = x.reshape(-1, self.m, self.d)
        z = traj - traj.mean(axis=1, keepdims=True)
        F = np.einsum("kt,ntc->nkc", self.W, z)
        if self.magnitude == "complex":
            mag = np.abs(F)
            safe = np.where(mag > 0, mag, 1.0)
            # componentwise division stays bounded even for subnormal moduli
            phase = np.where(mag > 0, F.real / safe + 1j * (F.imag / safe), 0.0)
        else:
            mag = np.abs(F.real) + np.abs(F.imag)
            phase = np.sign(F.real) + 1j * np.sign(F.imag)
        total = mag.sum(axis=(1, 2))
        # d|F_k| / dz_tau = Re(conj(phase_k) W[k, tau])
        g = np.einsum("kt,nkc->ntc", self.W, np.conj(phase)).real
        g = g - g.mean(axis=1, keepdims=True)
        return self.level - self.norm * total, (-self.norm * g).reshape(x.shape)


class Standardized(Statistic):
    """Evaluate ``base`` on ``mean + std * z`` so it can act on model coordinates."""

    def __init__(self, base: Statistic, mean, std):
        self.base = base
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(std, dtype=np.float64).reshape(-1)
        self.name = base.name

    def params(self):
        return self.base.params()

    def value_and_grad(self, z):
        z = _batch(z)
        value, grad = self.base.value_and_grad(self.mean + self.std * z)
        return value, grad * self.std


STATISTICS = {
    "fhn_spike": FhnSpike,
    "lorenz_arm": LorenzArm,
}


def make_statistic(name, m, d, temperature=0.0, **params):
    if name == "fhn_spike":
        if d != 4:
            raise ValueError("fhn_spike needs d = 4")
        return FhnSpike(m, temperature=temperature, **params)
    if name == "lorenz_arm":
        if d != 3:
            raise ValueError("lorenz_arm needs d = 3")
        return LorenzArm(m, **params)
    raise UnknownStatistic(f"unknown statistic {name!r}")


RELATIONS = ("equality", "greater_than")


@dataclass
class ConstraintSpec:
    """C(x) = y (equality) or C(x) > y (greater_than).

    ``kind`` is ``linear`` (matrix ``C``, vector ``y``), ``nonlinear`` (a
    scalar ``statistic`` and scalar ``y``) or ``none`` for the whole space.
    """

    kind: str
    y: np.ndarray
    relation: str = "equality"
    C: np.ndarray | None = None
    statistic: Statistic | None = None
    name: str = ""
    equality_tol: float = 1e-6

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"relation must be one of {RELATIONS}")
        self.y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        if self.kind == "linear":
            self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
            if self.C.shape[0] != self.y.size:
                raise ValueError("C and y disagree on the number of constraints")
            sv = np.linalg.svd(self.C, compute_uv=False)
            if sv[-1] <= 1e-10 * sv[0] or self.C.shape[0] > self.C.shape[1]:
                raise ValueError("linear constraint matrix must have full row rank")
        elif self.kind == "nonlinear":
            if self.statistic is None or self.y.size != 1:
                raise ValueError("nonlinear constraints need a statistic and a scalar y")
        elif self.kind != "none":
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.relation == "greater_than" and self.r != 1:
            raise ValueError("only scalar inequality constraints are supported")
        if not self.name:
            self.name = self.statistic.name if self.statistic is not None else self.kind

    @property
    def r(self):
        return self.y.size

    def evaluate(self, x):
        """Values (n, r) and gradients (n, r, D) at a batch of points."""
        x = _batch(x)
        if self.kind == "linear":
            grads = np.broadcast_to(self.C, (x.shape[0],) + self.C.shape)
            return x @ self.C.T, grads
        if self.kind == "nonlinear":
            value, grad = self.statistic.value_and_grad(x)
            return value[:, None], grad[:, None, :]
        return np.zeros((x.shape[0], 1)), np.zeros((x.shape[0], 1, x.shape[1]))

    def residual(self, x):
        return self.evaluate(x)[0] - self.y

    def contains(self, x):
        x = _batch(x)
        if self.kind == "none":
            return np.ones(x.shape[0], dtype=bool)
        res = self.residual(x)
        if self.relation == "greater_than":
            return res[:, 0] > 0
        return np.all(np.abs(res) <= self.equality_tol, axis=1)


@dataclass
class EventSpec:
    constraint: ConstraintSpec
    name: str = field(default="")

    def __post_init__(self):
        if not self.name:
            self.name = self.constraint.name

    def contains(self, x):
        return self.constraint.contains(x)

    def statistic_values(self, x):
        return self.constraint.residual(x)[:, 0]


def linear_constraint(C, y, relation="equality", name=""):
    return ConstraintSpec("linear", y, relation, C=C, name=name)


def nonlinear_constraint(statistic, y=0.0, relation="greater_than", name=""):
    return ConstraintSpec("nonlinear", y, relation, statistic=statistic, name=name)


def whole_space():
    return ConstraintSpec("none", 0.0, "greater_than", name="whole_space")


def halfspace_event(c, y, name="halfspace"):
    """The event c^T x > y as a scalar linear inequality."""
    return EventSpec(linear_constraint(np.atleast_2d(c), [y], "greater_than"), name)


def prefix_constraint(prefix, m, d):
    """Equality constraint pinning the first k steps of an m-step trajectory."""
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.float64))
    k = prefix.shape[0]
    if prefix.shape[1] != d:
        raise ValueError("prefix has the wrong state dimension")
    if not 1 <= k < m:
        raise ValueError("prefix length k must satisfy 1 <= k < m")
    C = np.eye(m * d)[: k * d]
    return ConstraintSpec("linear", prefix.reshape(-1), "equality", C=C, name=f"prefix{k}")


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def parse_constraint(text, m=None, d=None, standardization=None):
    """Parse a constraint spec.

    First line: ``kind=...; statistic=...; y=...; relation=...; temperature=...``.
    Linear specs follow with lines ``C: <row>`` (one per constraint) and
    optionally ``y: <values>``.  Statistic parameters (``threshold``,
    ``level``, ``norm``, ``magnitude``) may appear as extra keys.
    ``standardization = (mean, std)`` composes the statistic with the
    model-coordinate map when the constraint text says ``coords=data``.
    """
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError("empty constraint spec")
    opts = {}
    for item in lines[0].split(";"):
        if not item.strip():
            continue
        if "=" not in item:
            raise ValueError(f"malformed item {item.strip()!r}")
        key, val = item.split("=", 1)
        opts[key.strip()] = val.strip()
    known = {"kind", "statistic", "y", "relation", "temperature", "threshold", "level",
             "norm", "magnitude", "coords", "name"}
    unknown = set(opts) - known
    if unknown:
        raise ValueError(f"unknown constraint keys: {sorted(unknown)}")
    kind = opts.get("kind", "nonlinear")
    relation = opts.get("relation", "greater_than" if kind == "nonlinear" else "equality")
    name = opts.get("name", "")
    if kind == "none":
        return whole_space()
    if kind == "linear":
        rows, y = [], _floats(opts["y"]) if "y" in opts else None
        for ln in lines[1:]:
            tag, _, body = ln.partition(":")
            if tag.strip() == "C":
                rows.append(_floats(body))
            elif tag.strip() == "y":
                y = _floats(body)
            else:
                raise ValueError(f"unexpected line {ln!r}")
        if not rows or y is None:
            raise ValueError("linear spec needs C rows and y")
        C, y = np.array(rows), np.asarray(y, dtype=np.float64)
        if opts.get("coords", "model") == "data":
            if standardization is None:
                raise ValueError("coords=data needs standardisation statistics")
            # C x = y with x = mean + std * z becomes (C std) z = y - C mean
            mean, std = (np.asarray(v, dtype=np.float64) for v in standardization)
            C, y = C * std[None, :], y - C @ mean
        return linear_constraint(C, y, relation, name)
    if kind != "nonlinear":
        raise ValueError(f"unknown constraint kind {kind!r}")
    if m is None or d is None:
        raise ValueError("nonlinear statistics need the trajectory shape (m, d)")
    params = {}
    for key in ("threshold", "level", "norm"):
        if key in opts:
            params[key] = float(opts[key])
    if "magnitude" in opts:
        params["magnitude"] = opts["magnitude"]
    stat = make_statistic(opts.get("statistic", ""), m, d,
                          float(opts.get("temperature", 0.0)), **params)
    if opts.get("coords", "model") == "data":
        if standardization is None:
            raise ValueError("coords=data needs standardisation statistics")
        mean, std = standardization
        stat = Standardized(stat, mean, std)
    return nonlinear_constraint(stat, float(opts.get("y", 0.0)), relation, name)


def default_event(system, m, standardization=None, temperature=0.0):
    """The tail event studied for each system (C(x) > 0).

    The spike statistic acts on model (standardised) coordinates; the arm
    statistic acts on the rescaled data coordinates, reached through
    ``standardization``.
    """
    if system == "fitzhugh_nagumo":
        stat = FhnSpike(m, temperature=temperature)
    elif system == "lorenz_rescaled":
        stat = LorenzArm(m)
        if standardization is not None:
            stat = Standardized(stat, *standardization)
    else:
        raise ValueError(f"no default event for {system!r}")
    return EventSpec(nonlinear_constraint(stat, 0.0, "greater_than"), stat.name)
