"""SVG figures for curves and sweeps.  CSV output is the data contract; these
are a convenience layer.  SVGs are byte-reproducible (fixed hash salt, no date)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "monsff", "svg.fonttype": "path", "figure.figsize": (6.0, 4.2)}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_curves(curves, path, labels=None, title="", ylabel="SFF", bands=True, trajectories=None):
    """Log-log curves; values are clamped to (0, 1] for display only."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        if trajectories is not None:
            t, rows = trajectories
            for row in rows:
                ax.plot(t, np.clip(row, 1e-300, 1.0), color="0.75", lw=0.4, alpha=0.6)
        for i, c in enumerate(curves):
            label = labels[i] if labels else None
            v = np.clip(c.values, 1e-300, 1.0)
            (line,) = ax.plot(c.t, v, lw=1.0, label=label)
            if bands and c.stderr is not None and np.any(c.stderr > 0):
                lo = np.clip(c.values - c.stderr, 1e-300, 1.0)
                hi = np.clip(c.values + c.stderr, 1e-300, 1.0)
                ax.fill_between(c.t, lo, hi, color=line.get_color(), alpha=0.2, lw=0)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if labels:
            ax.legend(fontsize=8)
        _save(fig, path)


def plot_series(t, series, path, labels=None, title="", ylabel="", logy=True):
    """Generic log-x line chart of raw arrays (observables, purity, errors)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for i, y in enumerate(series):
            ax.plot(t, y, lw=1.0, label=labels[i] if labels else None)
        ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if labels:
            ax.legend(fontsize=8)
        _save(fig, path)


def plot_sweep(rows, path, title=""):
    """t_dip / t_plateau against the swept parameter on a log-x axis."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        x = np.array([r.value for r in rows])
        y = np.array([r.ratio for r in rows])
        ax.plot(x, y, marker="o", lw=1.0)
        if np.all(x > 0):
            ax.set_xscale("log")
        ax.set_xlabel(rows[0].parameter if rows else "")
        ax.set_ylabel("t_dip / t_plateau")
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_bars(values, path, reference=None, title="", xlabel="eigenstate", ylabel="frequency"):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        idx = np.arange(len(values))
        ax.bar(idx, values, color="C0", label="empirical")
        if reference is not None:
            ax.plot(idx, reference, "k_", ms=14, mew=2, label="Born")
            ax.legend(fontsize=8)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        _save(fig, path)
