"""Report figures written next to the CSV outputs.

Only ``matplotlib.figure.Figure`` is used (no pyplot state), so figures can
be rendered from worker threads and never open a window.
"""

from __future__ import annotations

import io

import numpy as np
from matplotlib.figure import Figure

FIGSIZE = (6.0, 3.6)
DPI = 100
# Fixed metadata keeps PNG bytes reproducible across runs.
PNG_METADATA = {"Software": None}


def _new(figsize=FIGSIZE):
    fig = Figure(figsize=figsize, dpi=DPI, layout="constrained")
    return fig, fig.add_subplot()


def spectrum_figure(values, d=None, title="Singular value spectrum"):
    """Normalised singular values on a log axis, with the rank cut marked."""
    values = np.asarray(values, dtype=np.float64)
    fig, ax = _new()
    if values.size and values[0] > 0:
        rel = values / values[0]
        idx = np.arange(1, rel.size + 1)
        floor = np.finfo(np.float64).tiny
        ax.semilogy(idx, np.maximum(rel, floor), ".", ms=3, color="C0")
    if d is not None:
        ax.axvline(d + 0.5, color="C3", lw=1, ls="--", label=f"d = {d}")
        ax.legend(loc="upper right", frameon=False)
    ax.set_xlabel("index")
    ax.set_ylabel(r"$\sigma_i / \sigma_1$")
    ax.set_title(title)
    return fig


def residual_figure(residuals, best=None, title="Attribution residuals"):
    """Bar chart of per-candidate least-squares residuals (log scale)."""
    names = [str(name) for name, _ in residuals]
    vals = np.array([r for _, r in residuals], dtype=np.float64)
    fig, ax = _new((max(4.0, 0.6 * len(names) + 2.0), 3.6))
    colors = ["C2" if n == best else "C0" for n in names]
    floor = np.finfo(np.float64).tiny
    ax.bar(np.arange(len(names)), np.maximum(vals, floor), color=colors)
    ax.set_yscale("log")
    ax.set_xticks(np.arange(len(names)), names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("residual")
    ax.set_title(title)
    return fig


def distribution_figure(probs, top=50, title="Extracted distribution"):
    """Largest probabilities in descending order."""
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")[:top]
    fig, ax = _new()
    ax.semilogy(np.arange(1, order.size + 1), probs[order], "-o", ms=2, lw=0.8)
    ax.set_xlabel("rank")
    ax.set_ylabel("probability")
    ax.set_title(title)
    return fig


def cost_figure(estimates, title="Calls per full output"):
    """Horizontal bars of calls per output for each strategy."""
    names = [e.strategy for e in estimates]
    calls = np.array([e.calls_per_output for e in estimates], dtype=np.float64)
    fig, ax = _new()
    y = np.arange(len(names))
    ax.barh(y, calls, color="C0")
    ax.set_yticks(y, names)
    ax.invert_yaxis()
    ax.set_xscale("log")
    ax.set_xlabel("calls per output")
    ax.set_title(title)
    return fig


def render_png(fig):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=PNG_METADATA)
    return buf.getvalue()


def save_figure(fig, path):
    """Write ``fig`` as PNG via an atomic replace; returns the path."""
    from .io import atomic_write_bytes
    atomic_write_bytes(path, render_png(fig))
    return path
