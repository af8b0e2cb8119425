"""Backend selection for the hot RK4 loop.

The compiled extension is used when it was built; otherwise the numpy
implementation takes over.  ``use_backend`` switches explicitly (tests and
the benchmark use it to compare both).
"""
import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

SYSTEM_IDS = {
    "exponential_decay": 0,
    "lorenz_rescaled": 1,
    "fitzhugh_nagumo": 2,
    "double_pendulum": 3,
}

BACKENDS = ("compiled", "numpy")
_active = "compiled" if _compiled is not None else "numpy"


def available_backends():
    return tuple(b for b in BACKENDS if b == "numpy" or _compiled is not None)


def active_backend():
    return _active


def use_backend(name):
    """Select ``"compiled"`` or ``"numpy"``; returns the previous backend."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and _compiled is None:
        raise RuntimeError("compiled kernel is not built; reinstall with Cython available")
    previous, _active = _active, name
    return previous


def rk4_integrate(kind, params, x0, dt, n_steps, record_every=1):
    """Fixed-step RK4 over a batch of initial states.

    Parameters
    ----------
    kind : int
        System id from ``SYSTEM_IDS``.
    params : array_like
        Flat coefficient vector in the layout ``dynamics`` builds.
    x0 : ndarray, shape (n, d)
    dt : float
    n_steps : int
    record_every : int
        Keep the state every this many steps (the initial state is always kept).

    Returns
    -------
    states : ndarray, shape (n, n_steps // record_every + 1, d)
        Recorded states; NaN after a trajectory fails.
    failed_step : ndarray of int64, shape (n,)
        First step producing a non-finite state, or -1.
    """
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    params = np.ascontiguousarray(params, dtype=np.float64)
    if x0.ndim != 2:
        raise ValueError("x0 must have shape (n, d)")
    if n_steps < 1 or record_every < 1:
        raise ValueError("n_steps and record_every must be >= 1")
    if _active == "compiled":
        return _compiled.rk4_integrate(int(kind), params, x0, float(dt),
                                       int(n_steps), int(record_every))
    return _kernels_py.rk4_integrate(int(kind), params, x0, float(dt),
                                     int(n_steps), int(record_every))
