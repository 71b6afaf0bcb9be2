"""Static PNG figures for the CLI report (mode decay, R0 sweeps, Monte-Carlo starts).

Only the Agg backend is used so the report renders headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 4.0),
    "font.size": 9,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.1,
    "legend.frameon": False,
    "savefig.dpi": 150,
}

_DASHES = ["-", "--", "-.", ":"]


def _closed(P):
    P = np.asarray(P, dtype=float)
    return np.vstack([P, P[:1]])


def plot_modes(times, states, names, path, title=None):
    """Every coefficient state against time; mean modes solid, variance modes dashed."""
    times = np.asarray(times)
    states = np.asarray(states)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, nm in enumerate(names):
            ls = "-" if nm.endswith("_0") else "--"
            ax.plot(times, states[:, k], ls, label=nm)
        ax.axhline(0.0, color="0.6", lw=0.5)
        ax.set_xlabel("t")
        ax.set_ylabel("coefficient value")
        if title:
            ax.set_title(title)
        ax.legend(ncol=2, fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_r0(boundaries, path, outer=(), center=None, title=None, labels=("x1", "x2")):
    """R0 boundary polylines (``[(label, Nx2)]``) with optional outer bounds and centre."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, (label, P) in enumerate(boundaries):
            C = _closed(P)
            ax.plot(C[:, 0], C[:, 1], _DASHES[k % len(_DASHES)], label=label)
        for k, (label, P) in enumerate(outer):
            C = _closed(P)
            ax.plot(C[:, 0], C[:, 1], color="k", lw=0.8, ls="--" if k % 2 == 0 else ":", label=label)
        if center is not None:
            ax.plot([center[0]], [center[1]], "k+", ms=8)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel(labels[0])
        ax.set_ylabel(labels[1])
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_validation(boundary, path, converged=None, diverged=None, trajectories=(), title=None,
                    labels=("x1", "x2")):
    """Certified boundary, sampled trajectories and the outer starts that diverged."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for T in trajectories:
            ax.plot(T[:, 0], T[:, 1], color="tab:blue", lw=0.4, alpha=0.6)
        C = _closed(boundary)
        ax.plot(C[:, 0], C[:, 1], color="tab:red", lw=1.4, label="certified boundary")
        if converged is not None and len(converged):
            c = np.asarray(converged)
            ax.plot(c[:, 0], c[:, 1], ".", color="tab:green", ms=2, label="outer start, converged")
        if diverged is not None and len(diverged):
            d = np.asarray(diverged)
            ax.plot(d[:, 0], d[:, 1], "x", color="k", ms=4, label="outer start, diverged")
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel(labels[0])
        ax.set_ylabel(labels[1])
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_history(histories, path, title=None):
    """Alternation objective per accepted iteration, one line per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, hist in histories:
            it = [h["iteration"] for h in hist]
            ob = [h["objective"] for h in hist]
            ax.plot(it, ob, "o-", ms=3, label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("volume proxy")
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
