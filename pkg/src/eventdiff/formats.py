"""Plain-text file formats: trajectory and sample CSVs, GMM specs, report tables.

All writers go through ``atomic_write`` (temporary file plus rename) and
print floats with 17 significant digits so files round-trip exactly and
reruns produce identical bytes.
"""
from __future__ import annotations

import os
import tempfile

import numpy as np

from .gmm import GmmDistribution


def atomic_write(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _header_line(fields):
    return "# " + " ".join(f"{k}={fmt(v)}" for k, v in fields.items()) + "\n"


def _rows(values):
    return "".join(",".join(f"{float(v):.17g}" for v in row) + "\n" for row in values)


def write_trajectory_csv(path, values, system, seed, extra=None):
    """One trajectory per row, time-major (m*d columns)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError("values must have shape (n, m, d)")
    n, m, d = values.shape
    fields = {"system": system, "d": d, "m": m, "n": n, "seed": seed}
    fields.update(extra or {})
    atomic_write(path, _header_line(fields) + _rows(values.reshape(n, m * d)))


def write_sample_csv(path, values, system, seed, t_min, n_steps, method, extra=None):
    fields = {"t_min": t_min, "n_steps": n_steps, "method": method}
    fields.update(extra or {})
    write_trajectory_csv(path, values, system, seed, fields)


def read_trajectory_csv(path):
    """Returns (values (n, m, d), header dict)."""
    header = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            for item in ln[1:].split():
                k, _, v = item.partition("=")
                header[k] = v
        elif ln.strip():
            body.append([float(v) for v in ln.split(",")])
    m, d = int(header["m"]), int(header["d"])
    data = np.array(body, dtype=np.float64).reshape(-1, m, d) if body else np.zeros((0, m, d))
    if "n" in header and data.shape[0] != int(header["n"]):
        raise ValueError("row count does not match the header")
    return data, header


def write_gmm(path, gmm: GmmDistribution):
    """``K=<k> d=<d>`` then one ``w | mu... | chol_lower...`` line per component."""
    lines = [f"K={gmm.K} d={gmm.dim}"]
    tril = np.tril_indices(gmm.dim)
    for k in range(gmm.K):
        w = f"{gmm.weights[k]:.17g}"
        mu = " ".join(f"{v:.17g}" for v in gmm.means[k])
        ch = " ".join(f"{v:.17g}" for v in gmm.chol[k][tril])
        lines.append(f"{w} | {mu} | {ch}")
    atomic_write(path, "\n".join(lines) + "\n")


def parse_gmm(text):
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    head = dict(item.split("=") for item in lines[0].split())
    K, d = int(head["K"]), int(head["d"])
    if len(lines) - 1 != K:
        raise ValueError(f"expected {K} component lines, found {len(lines) - 1}")
    tril = np.tril_indices(d)
    w, mus, covs = [], [], []
    for ln in lines[1:]:
        parts = [p.split() for p in ln.split("|")]
        if len(parts) != 3 or len(parts[0]) != 1 or len(parts[1]) != d or len(parts[2]) != d * (d + 1) // 2:
            raise ValueError(f"malformed component line {ln!r}")
        L = np.zeros((d, d))
        L[tril] = [float(v) for v in parts[2]]
        w.append(float(parts[0][0]))
        mus.append([float(v) for v in parts[1]])
        covs.append(L @ L.T)
    w = np.array(w)
    return GmmDistribution(w / w.sum() if abs(w.sum() - 1) < 1e-9 else w, np.array(mus), np.array(covs))


def read_gmm(path):
    with open(path) as fh:
        return parse_gmm(fh.read())


def write_table(path, columns, config=None, comments=()):
    """CSV with an optional ``# config:`` echo line and named columns of equal length."""
    names = list(columns)
    n = len(columns[names[0]]) if names else 0
    if any(len(columns[c]) != n for c in names):
        raise ValueError("columns differ in length")
    out = []
    if config is not None:
        out.append("# config: " + " ".join(f"{k}={fmt(v)}" for k, v in config.items()) + "\n")
    out.extend(f"# {c}\n" for c in comments)
    out.append(",".join(names) + "\n")
    for i in range(n):
        out.append(",".join(fmt(columns[c][i]) for c in names) + "\n")
    atomic_write(path, "".join(out))


def read_table(path):
    config, names, rows = {}, None, []
    with open(path) as fh:
        for ln in fh.read().splitlines():
            if ln.startswith("# config:"):
                for item in ln[len("# config:"):].split():
                    k, _, v = item.partition("=")
                    config[k] = v
            elif ln.startswith("#") or not ln.strip():
                continue
            elif names is None:
                names = ln.split(",")
            else:
                rows.append(ln.split(","))
    cols = {}
    for j, name in enumerate(names or []):
        vals = [r[j] for r in rows]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = vals
    return cols, config
