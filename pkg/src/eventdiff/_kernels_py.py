"""Pure numpy fallback for the compiled RK4 kernel.

Vectorised across trajectories; per-trajectory arithmetic follows the same
operation order as ``_kernels.pyx`` so both backends agree to rounding.
"""
import numpy as np


def _rhs(kind, p, x):
    if kind == 0:
        return -p[0] * x
    out = np.empty_like(x)
    if kind == 1:
        s = p[3]
        u1 = s * x[:, 0]
        u2 = s * x[:, 1]
        u3 = s * x[:, 2]
        out[:, 0] = (p[0] * (u2 - u1)) / s
        out[:, 1] = (u1 * (p[1] - u3) - u2) / s
        out[:, 2] = (u1 * u2 - p[2] * u3) / s
    elif kind == 2:
        x1, y1, x2, y2 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
        out[:, 0] = (x1 * (p[0] - x1) * (x1 - 1.0) - y1
                     + p[6] * (p[7] * (x1 - x1) + p[8] * (x2 - x1)))
        out[:, 1] = p[2] * x1 - p[4] * y1
        out[:, 2] = (x2 * (p[1] - x2) * (x2 - 1.0) - y2
                     + p[6] * (p[9] * (x1 - x2) + p[10] * (x2 - x2)))
        out[:, 3] = p[3] * x2 - p[5] * y2
    else:
        m1, m2, l1, l2, g = p[0], p[1], p[2], p[3], p[4]
        th1, th2, p1, p2 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
        delta = th1 - th2
        sd = np.sin(delta)
        cd = np.cos(delta)
        den = m1 + m2 * sd * sd
        out[:, 0] = (l2 * p1 - l1 * p2 * cd) / (l1 * l1 * l2 * den)
        out[:, 1] = (-m2 * l2 * p1 * cd + (m1 + m2) * l1 * p2) / (m2 * l1 * l2 * l2 * den)
        c1 = p1 * p2 * sd / (l1 * l2 * den)
        num = (m2 * l2 * l2 * p1 * p1 + (m1 + m2) * l1 * l1 * p2 * p2
               - 2.0 * m2 * l1 * l2 * p1 * p2 * cd)
        c2 = num * np.sin(2.0 * delta) / (2.0 * l1 * l1 * l2 * l2 * den * den)
        out[:, 2] = -(m1 + m2) * g * l1 * np.sin(th1) - c1 + c2
        out[:, 3] = -m2 * g * l2 * np.sin(th2) + c1 - c2
    return out


def rk4_integrate(kind, params, x0, dt, n_steps, record_every):
    """Integrate every row of ``x0``; see ``eventdiff.kernels.rk4_integrate``."""
    p = np.asarray(params, dtype=np.float64)
    x = np.array(x0, dtype=np.float64, copy=True)
    n, d = x.shape
    n_rec = n_steps // record_every + 1
    out = np.full((n, n_rec, d), np.nan)
    failed = np.full(n, -1, dtype=np.int64)
    out[:, 0] = x
    alive = np.ones(n, dtype=bool)
    half = 0.5 * dt
    sixth = dt / 6.0
    rec = 1
    for step in range(1, n_steps + 1):
        with np.errstate(all="ignore"):
            k1 = _rhs(kind, p, x)
            k2 = _rhs(kind, p, x + half * k1)
            k3 = _rhs(kind, p, x + half * k2)
            k4 = _rhs(kind, p, x + dt * k3)
            x = x + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = alive & ~np.isfinite(x).all(axis=1)
        if bad.any():
            failed[bad] = step
            alive &= ~bad
            x[~alive] = 0.0
        if step % record_every == 0:
            out[alive, rec] = x[alive]
            rec += 1
    return out, failed
