"""Figure rendering for experiment outputs.

Every report path of the CLI drops PNG figures next to the delimited
output: phase-plane trajectories with the constraint box for the linear
study, and per-tank level plots with the disturbance window marks for the
four-tank study.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .polytope import Polytope
from .sim import Trace

__all__ = ["plot_phase", "plot_levels", "plot_trace_timeseries"]


def _draw_box(ax, poly: Polytope, **kw):
    if poly.n != 2:
        return
    verts = poly.vertices()
    if verts.shape[0] < 3:
        return
    center = verts.mean(axis=0)
    order = np.argsort(np.arctan2(*(verts - center).T[::-1]))
    closed = np.vstack([verts[order], verts[order][:1]])
    ax.fill(closed[:, 0], closed[:, 1], alpha=0.12, **kw)
    ax.plot(closed[:, 0], closed[:, 1], lw=0.8, **kw)


def plot_phase(traces: dict[str, Trace], X: Polytope, path: str | Path,
               title: str = "") -> None:
    """Phase-plane trajectories of several controllers with the state box."""
    fig, ax = plt.subplots(figsize=(5.2, 4.2))
    _draw_box(ax, X, color="gray")
    for name, tr in traces.items():
        marker = "x" if tr.termination == "StoppedInfeasible" else None
        ax.plot(tr.x[:, 0], tr.x[:, 1], label=name, lw=1.2)
        if marker:
            ax.plot(tr.x[-1, 0], tr.x[-1, 1], marker, ms=9, mew=2,
                    color=ax.lines[-1].get_color())
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_levels(traces: dict[str, Trace], path: str | Path,
                bounds=(0.2, 1.36), k_marks=(50, 250, 450, 550),
                state_index: int = 0) -> None:
    """Water level of one tank over time for all controllers (ramp study)."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for name, tr in traces.items():
        ks = np.arange(tr.x.shape[0])
        ax.plot(ks, tr.x[:, state_index], label=name, lw=1.1)
        if tr.termination == "StoppedInfeasible":
            ax.plot(ks[-1], tr.x[-1, state_index], "x", ms=9, mew=2,
                    color=ax.lines[-1].get_color())
            ax.plot(ks[-1], tr.x[-1, state_index], "o", ms=11, mfc="none",
                    color=ax.lines[-1].get_color())
    for b in bounds:
        ax.axhline(b, color="k", ls=":", lw=0.8)
    for k in k_marks:
        ax.axvline(k, color="k", ls=":", lw=0.6)
    ax.set_xlabel("step $k$")
    ax.set_ylabel(f"$x_{{{state_index + 1}}}$")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_trace_timeseries(trace: Trace, path: str | Path) -> None:
    """States, inputs, value, and violation of one run."""
    fig, axes = plt.subplots(4, 1, figsize=(6.4, 8.0), sharex=True)
    ks = np.arange(trace.x.shape[0])
    for i in range(trace.x.shape[1]):
        axes[0].plot(ks, trace.x[:, i], label=f"$x_{{{i+1}}}$", lw=1.0)
    axes[0].set_ylabel("states")
    axes[0].legend(fontsize=7, ncol=4)
    ku = np.arange(trace.u.shape[0])
    for i in range(trace.u.shape[1]):
        axes[1].step(ku, trace.u[:, i], label=f"$u_{{{i+1}}}$", lw=1.0)
    axes[1].set_ylabel("inputs")
    axes[1].legend(fontsize=7, ncol=4)
    axes[2].semilogy(ku, np.maximum(trace.value, 1e-16), lw=1.0)
    axes[2].set_ylabel("value $V$")
    axes[3].plot(ks, trace.violation, lw=1.0)
    axes[3].set_ylabel("violation")
    axes[3].set_xlabel("step $k$")
    if trace.termination == "StoppedInfeasible":
        axes[0].set_title(f"stopped infeasible at k={trace.stopped_at}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
