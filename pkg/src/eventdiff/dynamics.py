"""Trajectory datasets for the bundled chaotic systems.

Three systems are provided (rescaled Lorenz, two coupled FitzHugh-Nagumo
neurons, the double pendulum in canonical coordinates) plus a linear decay
system used to check the integrator.  Every trajectory is integrated with
fixed-step RK4, burn-in is discarded and the recorded window is subsampled to
``m`` uniformly spaced states.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import kernels

STATE_DIMS = {"lorenz_rescaled": 3, "fitzhugh_nagumo": 4, "double_pendulum": 4}

# Parameter order fed to the RK4 kernel, per system.
PARAM_ORDER = {
    "exponential_decay": ("rate",),
    "lorenz_rescaled": ("sigma", "rho", "beta", "scale"),
    "fitzhugh_nagumo": ("a1", "a2", "b1", "b2", "c1", "c2", "k",
                        "A11", "A12", "A21", "A22"),
    "double_pendulum": ("m1", "m2", "l1", "l2", "g"),
}


class IntegrationDiverged(FloatingPointError):
    """A trajectory produced a non-finite state."""

    def __init__(self, tau, index=None):
        self.tau = tau
        self.index = index
        where = f" (trajectory {index})" if index is not None else ""
        super().__init__(f"integration diverged at tau={tau:.6g}{where}")


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    params: Mapping[str, float]
    init_mean: tuple
    init_std: tuple
    burn_in_time: float
    record_time: float
    embed_angles: bool = False
    dt: float | None = None

    def __post_init__(self):
        if self.kind not in PARAM_ORDER:
            raise ValueError(f"unknown system kind {self.kind!r}")
        missing = [k for k in PARAM_ORDER[self.kind] if k not in self.params]
        if missing:
            raise ValueError(f"{self.kind}: missing parameters {missing}")
        object.__setattr__(self, "init_mean", tuple(float(v) for v in self.init_mean))
        object.__setattr__(self, "init_std", tuple(float(v) for v in self.init_std))
        d = len(self.init_mean)
        if len(self.init_std) != d:
            raise ValueError("init_mean and init_std lengths differ")
        if self.kind in STATE_DIMS and d != STATE_DIMS[self.kind]:
            raise ValueError(f"{self.kind} has state dimension {STATE_DIMS[self.kind]}, got {d}")
        if min(self.init_std) <= 0:
            raise ValueError("init_std must be positive")
        if self.burn_in_time < 0 or self.record_time <= 0:
            raise ValueError("need burn_in_time >= 0 and record_time > 0")
        if self.embed_angles and self.kind != "double_pendulum":
            raise ValueError("embed_angles only applies to the double pendulum")
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def state_dim(self):
        return len(self.init_mean)

    @property
    def obs_dim(self):
        return self.state_dim

    def param_vector(self):
        return np.array([float(self.params[k]) for k in PARAM_ORDER[self.kind]])

    def replace(self, **changes):
        fields = dict(kind=self.kind, params=dict(self.params), init_mean=self.init_mean,
                      init_std=self.init_std, burn_in_time=self.burn_in_time,
                      record_time=self.record_time, embed_angles=self.embed_angles, dt=self.dt)
        fields.update(changes)
        return SystemSpec(**fields)


def default_system(kind: str) -> SystemSpec:
    """Default configuration for each system.

    FitzHugh-Nagumo coefficients are those of Ansmann et al. (2013), the
    extreme-event regime reused by Farazmand & Sapsis (2019).
    """
    if kind == "lorenz_rescaled":
        return SystemSpec(kind, {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0, "scale": 20.0},
                          (0.0,) * 3, (1.0,) * 3, burn_in_time=3.0, record_time=7.0)
    if kind == "fitzhugh_nagumo":
        params = {"a1": -0.025794, "a2": -0.025794, "b1": 0.0065, "b2": 0.0135,
                  "c1": 0.02, "c2": 0.02, "k": 0.128,
                  "A11": 0.0, "A12": 1.0, "A21": 1.0, "A22": 0.0}
        return SystemSpec(kind, params, (0.0,) * 4, (0.2,) * 4,
                          burn_in_time=1500.0, record_time=2500.0)
    if kind == "double_pendulum":
        params = {"m1": 1.0, "m2": 1.0, "l1": 1.0, "l2": 1.0, "g": 9.81}
        return SystemSpec(kind, params, (0.0,) * 4, (1.0, 1.0, 0.2, 0.3),
                          burn_in_time=0.0, record_time=30.0, embed_angles=True)
    if kind == "exponential_decay":
        return SystemSpec(kind, {"rate": 1.0}, (1.0,), (1.0,), burn_in_time=0.0, record_time=1.0)
    raise ValueError(f"unknown system kind {kind!r}")


# Channel names of the data each system produces (after observation).
def channel_names(spec: SystemSpec):
    if spec.kind == "lorenz_rescaled":
        return ("x", "y", "z")
    if spec.kind == "fitzhugh_nagumo":
        return ("x1", "y1", "x2", "y2")
    if spec.kind == "double_pendulum":
        if spec.embed_angles:
            return ("cos_theta1", "sin_theta1", "cos_theta2", "sin_theta2")
        return ("theta1", "theta2", "omega1", "omega2")
    return tuple(f"x{i}" for i in range(spec.state_dim))


def system_rhs(spec: SystemSpec, state, tau=0.0):
    """dx/dtau for a single state (all systems are autonomous)."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (spec.state_dim,):
        raise ValueError(f"state must have shape ({spec.state_dim},), got {state.shape}")
    kind = kernels.SYSTEM_IDS[spec.kind]
    return kernels._kernels_py._rhs(kind, spec.param_vector(), state[None, :])[0]


def hamiltonian(spec: SystemSpec, states):
    """Total energy of double-pendulum canonical states (theta1, theta2, p1, p2)."""
    if spec.kind != "double_pendulum":
        raise ValueError("hamiltonian is defined for the double pendulum only")
    p = spec.params
    m1, m2, l1, l2, g = p["m1"], p["m2"], p["l1"], p["l2"], p["g"]
    s = np.asarray(states, dtype=np.float64)
    th1, th2, p1, p2 = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    delta = th1 - th2
    kinetic = ((m2 * l2**2 * p1**2 + (m1 + m2) * l1**2 * p2**2
                - 2 * m2 * l1 * l2 * p1 * p2 * np.cos(delta))
               / (2 * m2 * l1**2 * l2**2 * (m1 + m2 * np.sin(delta) ** 2)))
    potential = -(m1 + m2) * g * l1 * np.cos(th1) - m2 * g * l2 * np.cos(th2)
    return kinetic + potential


def _run(spec, x0, dt, n_steps, record_every, tau0=0.0, offset=0):
    states, failed = kernels.rk4_integrate(kernels.SYSTEM_IDS[spec.kind], spec.param_vector(),
                                           x0, dt, n_steps, record_every)
    bad = np.flatnonzero(failed >= 0)
    if bad.size:
        j = int(bad[0])
        raise IntegrationDiverged(tau0 + failed[j] * dt, index=offset + j)
    return states


def integrate(spec: SystemSpec, x0, total_time, dt):
    """Fixed-step RK4 from ``x0``, returning every intermediate state.

    The step count is ``round(total_time / dt)`` (at least one) and the step is
    stretched to land exactly on ``total_time``.  ``x0`` may be a single state
    (returns ``(n_steps + 1, d)``) or a batch ``(n, d)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if total_time < dt * (1 - 1e-12):
        raise ValueError("total_time must be >= dt")
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    batch = x0[None, :] if single else x0
    if batch.shape[1] != spec.state_dim:
        raise ValueError(f"state dimension {batch.shape[1]} != {spec.state_dim}")
    n_steps = max(1, int(round(total_time / dt)))
    states = _run(spec, batch, total_time / n_steps, n_steps, 1)
    return states[0] if single else states


def observe(spec: SystemSpec, states):
    """Map raw integrator states to the recorded data channels.

    The pendulum's canonical momenta become angular velocities, or, with
    ``embed_angles``, each angle becomes (cos, sin) and the velocities are
    dropped.
    """
    if spec.kind != "double_pendulum":
        return states
    th1, th2 = states[..., 0], states[..., 1]
    if spec.embed_angles:
        return np.stack([np.cos(th1), np.sin(th1), np.cos(th2), np.sin(th2)], axis=-1)
    flat = states.reshape(-1, 4)
    rhs = kernels._kernels_py._rhs(kernels.SYSTEM_IDS[spec.kind], spec.param_vector(), flat)
    omega = rhs[:, :2].reshape(states.shape[:-1] + (2,))
    return np.concatenate([states[..., :2], omega], axis=-1)


@dataclass
class Trajectory:
    values: np.ndarray
    tau_grid: np.ndarray
    system: SystemSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.tau_grid = np.asarray(self.tau_grid, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise ValueError("values must be an (m, d) array with m >= 2")
        if self.tau_grid.shape != (self.values.shape[0],):
            raise ValueError("tau_grid length must equal m")
        steps = np.diff(self.tau_grid)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
            raise ValueError("tau_grid must be strictly increasing and uniform")
        if not np.isfinite(self.values).all():
            raise ValueError("trajectory contains non-finite values")

    @property
    def m(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


@dataclass
class Dataset:
    """A batch of trajectories sharing system, ``m`` and ``d``.

    ``values`` has shape (n, m, d).  ``start_states`` holds the raw integrator
    state at the start of each recorded window, which the perturbed-rollout
    baseline restarts from.
    """

    values: np.ndarray
    tau_grid: np.ndarray
    system: SystemSpec
    seed: int
    split: str = "train"
    start_states: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ValueError("values must be a nonempty (n, m, d) array")
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")

    def __len__(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def d(self):
        return self.values.shape[2]

    @property
    def trajectories(self):
        return [Trajectory(v, self.tau_grid, self.system) for v in self.values]

    def flat(self):
        """Time-major flattening to (n, m*d) vectors."""
        return self.values.reshape(self.n, -1)


def _record_plan(spec: SystemSpec, m: int):
    dt0 = spec.dt if spec.dt is not None else spec.record_time / (50.0 * m)
    per_interval = max(1, math.ceil(spec.record_time / (m - 1) / dt0 - 1e-9))
    dt_rec = spec.record_time / ((m - 1) * per_interval)
    n_burn = math.ceil(spec.burn_in_time / dt0 - 1e-9) if spec.burn_in_time > 0 else 0
    dt_burn = spec.burn_in_time / n_burn if n_burn else 0.0
    return dt_rec, per_interval, dt_burn, n_burn


def _simulate_window(spec, x0, m, offset=0):
    """Burn in, then record ``m`` uniformly spaced raw states per row of ``x0``."""
    dt_rec, per_interval, dt_burn, n_burn = _record_plan(spec, m)
    start = x0
    if n_burn:
        start = _run(spec, x0, dt_burn, n_burn, n_burn, offset=offset)[:, -1]
    raw = _run(spec, start, dt_rec, (m - 1) * per_interval, per_interval,
               tau0=spec.burn_in_time, offset=offset)
    return start, raw


def initial_conditions(spec: SystemSpec, n: int, seed: int, start_index: int = 0):
    """Gaussian initial states; row ``i`` depends only on ``(seed, start_index + i)``."""
    mean = np.array(spec.init_mean)
    std = np.array(spec.init_std)
    out = np.empty((n, spec.state_dim))
    for i in range(n):
        rng = np.random.default_rng([int(seed), start_index + i])
        out[i] = mean + std * rng.standard_normal(spec.state_dim)
    return out


def generate_dataset(spec: SystemSpec, n: int, m: int, seed: int, split: str = "train",
                     start_index: int = 0) -> Dataset:
    if n < 1 or m < 2:
        raise ValueError("need n >= 1 and m >= 2")
    x0 = initial_conditions(spec, n, seed, start_index)
    start, raw = _simulate_window(spec, x0, m, offset=start_index)
    tau = spec.burn_in_time + np.linspace(0.0, spec.record_time, m)
    return Dataset(observe(spec, raw), tau, spec, int(seed), split, start_states=start,
                   metadata={"start_index": start_index})


def generate_splits(spec: SystemSpec, n_train: int = 4000, n_test: int = 500, m: int = 60,
                    seed: int = 0):
    """Train/test datasets; test trajectories use indices after the training ones."""
    train = generate_dataset(spec, n_train, m, seed, "train")
    test = generate_dataset(spec, n_test, m, seed, "test", start_index=n_train)
    return train, test


def relative_error(a, b):
    """Per-timestep ||a - b|| / (||a|| + ||b||) over the state components."""
    a = a.values if isinstance(a, Trajectory) else np.asarray(a, dtype=np.float64)
    b = b.values if isinstance(b, Trajectory) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    num = np.linalg.norm(a - b, axis=-1)
    den = np.linalg.norm(a, axis=-1) + np.linalg.norm(b, axis=-1)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def perturbed_baseline(spec: SystemSpec, start_state, eps_std: float, m: int, rng=None) -> Trajectory:
    """Re-run the recorded window from ``start_state`` plus N(0, eps_std^2) noise.

    No burn-in is applied: ``start_state`` is the raw state at the start of the
    recorded window (``Dataset.start_states``).
    """
    if eps_std < 0:
        raise ValueError("eps_std must be >= 0")
    x = np.array(start_state, dtype=np.float64)
    if eps_std > 0:
        rng = np.random.default_rng() if rng is None else rng
        x = x + eps_std * rng.standard_normal(x.shape)
    no_burn = spec.replace(burn_in_time=0.0)
    _, raw = _simulate_window(no_burn, x[None, :], m)
    tau = spec.burn_in_time + np.linspace(0.0, spec.record_time, m)
    return Trajectory(observe(spec, raw[0]), tau, spec)
