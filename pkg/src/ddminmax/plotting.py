"""SVG line charts rendered from run and sweep CSV files.

Plots are built from the files on disk, never from live objects, so they
cannot influence numerical output.
"""

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {k: [r[k] for r in rows] for k in (rows[0].keys() if rows else [])}
    return cols


def _floats(vals):
    return np.array([float(v) if v not in ("", None) else np.nan for v in vals])


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_run(csv_path, prefix):
    """Write state, input, cumulative cost and gamma charts; return the paths."""
    cols = _read(csv_path)
    if not cols:
        return []
    t = _floats(cols["t"])
    out = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k in sorted(k for k in cols if k.startswith("x_")):
        ax.plot(t, _floats(cols[k]), label=k)
    ax.set_xlabel("step")
    ax.set_ylabel("state")
    ax.legend(loc="best", fontsize="small")
    out.append(_save(fig, f"{prefix}_states.svg"))

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k in sorted(k for k in cols if k.startswith("u_")):
        ax.step(t, _floats(cols[k]), where="post", label=k)
    ax.set_xlabel("step")
    ax.set_ylabel("input")
    ax.legend(loc="best", fontsize="small")
    out.append(_save(fig, f"{prefix}_inputs.svg"))

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(t, np.cumsum(_floats(cols["stage_cost"])))
    ax.set_xlabel("step")
    ax.set_ylabel("cumulative cost")
    out.append(_save(fig, f"{prefix}_cost.svg"))

    g = _floats(cols["gamma"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if np.any(np.isfinite(g) & (g > 0)):
        ax.semilogy(t, g, marker=".", label="gamma")
    ax.semilogy(t, np.maximum(_floats(cols["V"]), 1e-300), label="V")
    ax.set_xlabel("step")
    ax.legend(loc="best", fontsize="small")
    out.append(_save(fig, f"{prefix}_gamma.svg"))
    return out


def plot_sweep(csv_path, path):
    cols = _read(csv_path)
    if not cols:
        return None
    eps = _floats(cols["eps"])
    cost = _floats(cols["total_cost"])
    ok = np.array([v == "True" for v in cols["stable"]])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.loglog(eps[ok], cost[ok], "o", label="stable")
    if np.any(~ok):
        ax.loglog(eps[~ok], np.where(np.isfinite(cost[~ok]), cost[~ok], np.nanmax(cost[ok]) if ok.any() else 1.0),
                  "x", label="not stable")
    ax.set_xlabel("noise bound")
    ax.set_ylabel("closed-loop cost")
    ax.legend(loc="best", fontsize="small")
    return _save(fig, path)
