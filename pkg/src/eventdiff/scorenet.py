"""A small MLP score network and its denoising score-matching training loop.

Everything is plain numpy in float64: the forward pass, reverse-mode
parameter gradients, forward-mode Jacobian-vector products with respect to
the input, Adam and the parameter EMA.

The network predicts the noise: score(x, t) = -eps_hat(x, t) / sigma_t.  Its
input is the state scaled by c_in(t) = 1 / sqrt(1 + sigma_t^2), which keeps
the input near unit scale for standardised data at every noise level,
followed by Fourier features of t and log(sigma_t) / 4.

With ``skip=True`` (the default) the network output is added to the exact
score of a standard normal, -x / (1 + sigma_t^2).  For standardised data this
is already the right answer at large noise, so the layers only have to learn
the non-Gaussian correction.  Without it, a small relative error in a
near-identity map at large sigma pushes samples far outside the data.
"""
from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .diffusion import NoiseSchedule

PARAMETERIZATIONS = ("noise_pred", "score_pred")
WEIGHTINGS = ("sigma2", "inverse_sigma2")
CHECKPOINT_MAGIC = "eventdiff-checkpoint"
CHECKPOINT_VERSION = 2


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite at epoch {epoch}")


def _silu(a):
    sig = 0.5 * (1.0 + np.tanh(0.5 * a))  # overflow-free logistic
    return a * sig, sig


def _silu_grad(a, sig):
    return sig * (1.0 + a * (1.0 - sig))


class MlpScoreNet:
    """Fully connected network with SiLU activations.

    Parameters live in one flat float64 vector; ``layers`` holds (W, b)
    views into it so optimisers can work on the flat array directly.
    """

    def __init__(self, dim, hidden=(256, 256, 256), n_freq=16, max_freq=100.0,
                 parameterization="noise_pred", schedule: NoiseSchedule | None = None,
                 params=None, seed=0, skip=True):
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_freq = int(n_freq)
        self.freqs = np.geomspace(1.0, max_freq, self.n_freq) if self.n_freq else np.zeros(0)
        if np.any(self.freqs <= 0):
            raise ValueError("time-embedding frequencies must be positive")
        self.max_freq = float(max_freq)
        self.parameterization = parameterization
        self.skip = bool(skip)
        self.schedule = NoiseSchedule() if schedule is None else schedule
        self.widths = (self.dim + 2 * self.n_freq + 1,) + self.hidden + (self.dim,)
        self.shapes = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            self.shapes += [(fan_in, fan_out), (fan_out,)]
        self.n_params = sum(int(np.prod(s)) for s in self.shapes)
        if params is None:
            params = self.init_params(np.random.default_rng(seed))
        self.set_params(params)

    # -- parameters --------------------------------------------------------
    def init_params(self, rng):
        flat = np.zeros(self.n_params)
        views = self._views(flat)
        n_layers = len(views)
        for i, (W, _) in enumerate(views):
            if i < n_layers - 1:  # the output layer starts at zero
                W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[0])
        return flat

    def _views(self, flat):
        views, off = [], 0
        for k in range(0, len(self.shapes), 2):
            ws, bs = self.shapes[k], self.shapes[k + 1]
            nw, nb = ws[0] * ws[1], bs[0]
            views.append((flat[off:off + nw].reshape(ws), flat[off + nw:off + nw + nb]))
            off += nw + nb
        return views

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.params = flat.copy()
        self.layers = self._views(self.params)

    def copy(self, params=None):
        net = MlpScoreNet.__new__(MlpScoreNet)
        net.__dict__.update({k: v for k, v in self.__dict__.items() if k not in ("params", "layers")})
        net.set_params(self.params if params is None else params)
        return net

    # -- forward -------------------------------------------------------------
    def _time_features(self, t, n):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        sigma = self.schedule.sigma(t)
        ang = t[:, None] * self.freqs[None, :]
        feats = np.concatenate([np.sin(ang), np.cos(ang), (np.log(sigma) / 4.0)[:, None]], axis=1)
        c_in = 1.0 / np.sqrt(1.0 + sigma**2)
        return feats, c_in, sigma

    def _forward(self, x, t, keep=False):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected inputs of width {self.dim}, got {x.shape[1]}")
        feats, c_in, sigma = self._time_features(t, x.shape[0])
        h = np.concatenate([x * c_in[:, None], feats], axis=1)
        cache = [(h, None, None)]
        for W, b in self.layers[:-1]:
            a = h @ W + b
            h, sig = _silu(a)
            if keep:
                cache.append((h, a, sig))
        W, b = self.layers[-1]
        out = h @ W + b
        return out, sigma, c_in, (cache if keep else h)

    def raw(self, x, t):
        """Raw network output (eps_hat for noise_pred), including the skip term."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out, sigma, _, _ = self._forward(x, t)
        return out + self._skip_coeff(sigma)[:, None] * x / self._out_scale(sigma)[:, None]

    def _out_scale(self, sigma):
        return -1.0 / sigma if self.parameterization == "noise_pred" else np.ones_like(sigma)

    def _skip_coeff(self, sigma):
        """k(sigma) such that the skip term contributes k * x to the score."""
        return -1.0 / (1.0 + sigma**2) if self.skip else np.zeros_like(sigma)

    def score(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out, sigma, _, _ = self._forward(x, t)
        return out * self._out_scale(sigma)[:, None] + self._skip_coeff(sigma)[:, None] * x

    __call__ = score

    def score_jvp(self, x, t, v):
        """(d score / dx) v by forward-mode differentiation through the layers."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        feats, c_in, sigma = self._time_features(t, x.shape[0])
        h = np.concatenate([x * c_in[:, None], feats], axis=1)
        dh = np.concatenate([v * c_in[:, None], np.zeros_like(feats)], axis=1)
        for W, b in self.layers[:-1]:
            a = h @ W + b
            da = dh @ W
            h, sig = _silu(a)
            dh = _silu_grad(a, sig) * da
        W, _ = self.layers[-1]
        return (dh @ W) * self._out_scale(sigma)[:, None] + self._skip_coeff(sigma)[:, None] * v

    def score_vjp(self, x, t, u):
        """(d score / dx)^T u by a reverse pass."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = np.broadcast_to(np.asarray(u, dtype=np.float64), x.shape)
        _, sigma, c_in, cache = self._forward(x, t, keep=True)
        g = (u * self._out_scale(sigma)[:, None]) @ self.layers[-1][0].T
        for k in range(len(self.layers) - 2, -1, -1):
            _, a, sig = cache[k + 1]
            g = (g * _silu_grad(a, sig)) @ self.layers[k][0].T
        return g[:, :self.dim] * c_in[:, None] + self._skip_coeff(sigma)[:, None] * u

    # -- training gradient ---------------------------------------------------
    def loss_and_grad(self, x_t, t, eps, weights):
        """Weighted mean of ||eps_hat - eps||^2 and its gradient w.r.t. the flat parameters.

        For ``score_pred`` the regression target is the kernel score and
        residuals are measured in score units times sigma.
        """
        out, sigma, _, cache = self._forward(x_t, t, keep=True)
        skip = self._skip_coeff(sigma)[:, None] * x_t
        if self.parameterization == "noise_pred":
            resid = out - sigma[:, None] * skip - eps
        else:
            resid = (out + skip + eps / sigma[:, None]) * sigma[:, None]
        B = x_t.shape[0]
        per_item = np.sum(resid**2, axis=1)
        loss = float(np.mean(weights * per_item))
        g_out = (2.0 / B) * weights[:, None] * resid
        if self.parameterization == "score_pred":
            g_out = g_out * sigma[:, None]
        grad = np.zeros(self.n_params)
        gviews = self._views(grad)
        g = g_out
        for k in range(len(self.layers) - 1, -1, -1):
            h_in = cache[k][0]
            gW, gb = gviews[k]
            gW[...] = h_in.T @ g
            gb[...] = g.sum(axis=0)
            if k > 0:
                _, a, sig = cache[k]
                g = (g @ self.layers[k][0].T) * _silu_grad(a, sig)
        return loss, grad


def shifted_grid_times(batch, rng, t_min):
    """t_i = frac((i + u) / B) with one uniform u per batch, clamped to [t_min, 1]."""
    u = rng.random()
    t = np.mod((np.arange(batch) + u) / batch, 1.0)
    return np.clip(t, t_min, 1.0)


def loss_weights(sched, t, weighting):
    if weighting == "sigma2":
        return np.ones_like(t)
    if weighting == "inverse_sigma2":
        return 1.0 / sched.sigma(t) ** 4
    raise ValueError(f"loss weighting must be one of {WEIGHTINGS}")


def dsm_loss(net: MlpScoreNet, x0, rng, weighting="sigma2"):
    """Denoising score-matching loss and parameter gradient on one batch.

    With s = -eps_hat / sigma and target -eps / sigma,
    ||s - target||^2 * lambda(t) equals ||eps_hat - eps||^2 for lambda = sigma^2.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    sched = net.schedule
    t = shifted_grid_times(x0.shape[0], rng, sched.t_min)
    eps = rng.standard_normal(x0.shape)
    x_t = x0 + sched.sigma(t)[:, None] * eps
    return net.loss_and_grad(x_t, t, eps, loss_weights(sched, t, weighting))


def dsm_floor_gaussian(v, dim, sched, t):
    """Irreducible loss E||eps_hat* - eps||^2 for data N(0, v I), averaged over the given times."""
    sigma2 = sched.sigma(np.asarray(t)) ** 2
    return float(np.mean(dim * v / (v + sigma2)))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; returns the new parameter vector."""
    if grads.shape != state.m.shape:
        raise ValueError("gradient shape does not match optimiser state")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 2000
    ema_period: float = 400.0
    loss_weighting: str = "sigma2"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.loss_weighting not in WEIGHTINGS:
            raise ValueError(f"loss_weighting must be one of {WEIGHTINGS}")
        for name in ("learning_rate", "ema_period", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def full_scale_profile(cls, **overrides):
        """Long-run settings: lr 1e-4, batch 500, 10000 epochs, EMA period 2000."""
        base = dict(learning_rate=1e-4, batch_size=500, epochs=10000, ema_period=2000.0)
        base.update(overrides)
        return cls(**base)


def ema_decay(period_epochs, steps_per_epoch):
    return float(min(max(1.0 - 1.0 / (period_epochs * steps_per_epoch), 0.0), 1.0))


@dataclass
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, flat_data, per_channel=None):
        """Per-feature statistics, or per channel when ``per_channel = d`` (time-major layout)."""
        flat_data = np.asarray(flat_data, dtype=np.float64)
        if per_channel:
            d = int(per_channel)
            ch = flat_data.reshape(-1, d)
            m = np.tile(ch.mean(axis=0), flat_data.shape[1] // d)
            s = np.tile(ch.std(axis=0), flat_data.shape[1] // d)
        else:
            m, s = flat_data.mean(axis=0), flat_data.std(axis=0)
        return cls(m, np.where(s > 0, s, 1.0))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def forward(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, z):
        return self.mean + self.std * np.asarray(z)


@dataclass
class Checkpoint:
    net: MlpScoreNet
    raw_params: np.ndarray
    ema_params: np.ndarray
    config: TrainConfig
    standardization: Standardization
    loss_history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def model(self, use_ema=True):
        """A score model in standardised coordinates (EMA parameters by default)."""
        return self.net.copy(self.ema_params if use_ema else self.raw_params)


def train(data, net: MlpScoreNet, cfg: TrainConfig, standardization: Standardization | None = None,
          log=None, metadata=None):
    """Train on ``data`` (n, D), already in model coordinates.

    Returns a Checkpoint holding raw and EMA parameters; identical inputs
    and seed give bitwise-identical checkpoints.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if data.shape[1] != net.dim:
        raise ValueError("data width does not match the network")
    rng = np.random.default_rng(cfg.seed)
    n = data.shape[0]
    batch = min(cfg.batch_size, n)
    steps_per_epoch = max(n // batch, 1)
    decay = ema_decay(cfg.ema_period, steps_per_epoch)
    params = net.params.copy()
    ema = params.copy()
    state = AdamState.zeros(net.n_params)
    history = []
    work = net.copy(params)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for k in range(steps_per_epoch):
            idx = perm[k * batch:(k + 1) * batch]
            work.set_params(params)
            loss, grad = dsm_loss(work, data[idx], rng, cfg.loss_weighting)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            params = adam_step(params, grad, state, cfg.learning_rate, cfg.beta1, cfg.beta2,
                               cfg.adam_eps)
            ema = decay * ema + (1.0 - decay) * params
            total += loss
        history.append(total / steps_per_epoch)
        if log is not None:
            log(epoch, history[-1])
    std = Standardization.identity(net.dim) if standardization is None else standardization
    return Checkpoint(net.copy(params), params, ema, cfg, std, history, dict(metadata or {}))


def net_score_jvp_fd(model, x, t, v):
    """Central-difference Jacobian-vector product of ``model.score``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
    vn = np.linalg.norm(v, axis=1, keepdims=True)
    h = 1e-4 * (1.0 + np.linalg.norm(x, axis=1, keepdims=True)) / np.maximum(vn, 1.0)
    return (model.score(x + h * v, t) - model.score(x - h * v, t)) / (2.0 * h)


# -- checkpoint I/O ------------------------------------------------------------

def _fmt(values):
    return ",".join(f"{float(v):.17g}" for v in np.ravel(values))


def save_checkpoint(ckpt: Checkpoint, path):
    net = ckpt.net
    sched = net.schedule
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "dim": net.dim,
        "hidden": ",".join(str(h) for h in net.hidden),
        "n_freq": net.n_freq,
        "max_freq": f"{net.max_freq:.17g}",
        "parameterization": net.parameterization,
        "skip": int(net.skip),
        "sigma_min": f"{sched.sigma_min:.17g}",
        "sigma_max": f"{sched.sigma_max:.17g}",
        "t_min": f"{sched.t_min:.17g}",
        "n_params": net.n_params,
        "std_mean": _fmt(ckpt.standardization.mean),
        "std_scale": _fmt(ckpt.standardization.std),
        "loss_history": _fmt(ckpt.loss_history),
    }
    for f in fields(TrainConfig):
        header[f"train.{f.name}"] = getattr(ckpt.config, f.name)
    for k, v in ckpt.metadata.items():
        header[f"meta.{k}"] = v
    text = "".join(f"{k}={v}\n" for k, v in header.items()) + "end_header\n"
    blob = (text.encode("ascii")
            + np.asarray(ckpt.raw_params, dtype="<f8").tobytes()
            + np.asarray(ckpt.ema_params, dtype="<f8").tobytes())
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    marker = b"end_header\n"
    cut = data.find(marker)
    if cut < 0:
        raise ValueError("not a checkpoint file: header terminator missing")
    header = {}
    for line in io.StringIO(data[:cut].decode("ascii")):
        key, _, val = line.rstrip("\n").partition("=")
        header[key] = val
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    sched = NoiseSchedule(float(header["sigma_min"]), float(header["sigma_max"]),
                          float(header["t_min"]))
    n_params = int(header["n_params"])
    body = np.frombuffer(data[cut + len(marker):], dtype="<f8")
    if body.size != 2 * n_params:
        raise ValueError("checkpoint weight blob has the wrong size")
    raw, ema = body[:n_params].astype(np.float64), body[n_params:].astype(np.float64)
    net = MlpScoreNet(int(header["dim"]), [int(h) for h in header["hidden"].split(",")],
                      int(header["n_freq"]), float(header["max_freq"]),
                      header["parameterization"], sched, params=raw,
                      skip=bool(int(header.get("skip", "0"))))
    kwargs = {}
    for f in fields(TrainConfig):
        kwargs[f.name] = _parse_scalar(header[f"train.{f.name}"])
    cfg = TrainConfig(**kwargs)
    std = Standardization(_parse_vec(header["std_mean"]), _parse_vec(header["std_scale"]))
    history = list(_parse_vec(header["loss_history"])) if header["loss_history"] else []
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    return Checkpoint(net, raw, ema, cfg, std, history, meta)


def _parse_vec(text):
    return np.array([float(v) for v in text.split(",")]) if text else np.zeros(0)


def _parse_scalar(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def config_dict(cfg: TrainConfig):
    return asdict(cfg)
