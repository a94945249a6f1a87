"""Optional PNG figures for ``--plot``; the CSV/JSON outputs stay authoritative."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .discrepancy import moving_average  # noqa: E402


def _mark(ax, step, style, label):
    if step is not None:
        ax.axvline(step, linestyle=style, color="k", linewidth=0.8, label=label)


def plot_run(runlog, summary: dict, path) -> None:
    """D_t (raw and smoothed) above the per-member training loss."""
    steps = np.asarray(runlog.steps)
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    top.plot(steps, runlog.series.values, lw=0.8, label="D_t")
    w = runlog.series.window
    if len(steps) >= w:
        sm = moving_average(runlog.series.values, w)
        top.plot(steps[: len(sm)], sm, lw=1.5, label="smoothed")
    _mark(top, summary.get("tau_0"), "--", "tau_0")
    _mark(top, summary.get("peak_step"), ":", "peak")
    top.set_ylabel("discrepancy")
    top.legend(fontsize=8)
    for j in range(runlog.n_members):
        bottom.plot(steps, runlog.column("loss", j), lw=0.8, label=f"loss {j + 1}")
        if runlog.has_oracle():
            bottom.plot(steps, runlog.column("oracle_err", j), lw=0.8, ls="--", label=f"oracle {j + 1}")
    bottom.set_yscale("log")
    bottom.set_xlabel("step")
    bottom.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(result, path) -> None:
    """D* against realized noise rate with the fitted line."""
    pts = [p for p in result.points if p.usable]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([p.E_realized for p in pts], [p.D_star for p in pts], s=18)
    if result.fit is not None:
        E = np.linspace(0.0, 1.0, 50)
        ax.plot(E, result.fit.predict(E), lw=1, label=f"R^2 = {result.fit.r_squared:.3f}")
        ax.legend(fontsize=8)
    ax.set_xlabel("realized noise rate E")
    ax.set_ylabel("D*")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_kernel(reports, path) -> None:
    """The measured derivative against the +-(delta_min + eps_min) band."""
    t = [r.t for r in reports]
    band = np.array([r.delta_min + r.eps_min for r in reports])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(t, -band, band, alpha=0.2, label="delta_min + eps_min")
    ax.plot(t, [r.lhs for r in reports], marker=".", lw=1, label="dD/dt (kernel time)")
    ax.set_xlabel("step")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
