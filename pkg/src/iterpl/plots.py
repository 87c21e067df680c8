"""Figure rendering for run reports. Headless only: every function writes a
PNG to disk and returns the path, nothing is shown interactively."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .trainer import NO_DATA


def plot_learning_curve(records, out_path) -> Path:
    """Dev error rate over updates, with phase boundaries and the PL quality
    track when the run produced one."""
    out_path = Path(out_path)
    steps = [r.update_index for r in records]
    dev = [r.dev_ter for r in records]

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, dev, marker="o", markersize=3, label="dev TER", color="tab:blue")

    pl_pts = [(r.update_index, r.pl_oracle_ter) for r in records
              if r.pl_oracle_ter != NO_DATA]
    if pl_pts:
        ax.plot(*zip(*pl_pts), marker=".", markersize=3, linestyle="--",
                label="PL vs oracle TER", color="tab:orange")

    prev_phase = None
    for r in records:
        if prev_phase is not None and r.phase != prev_phase:
            ax.axvline(r.update_index, color="gray", linestyle=":", linewidth=1)
            ax.text(r.update_index, ax.get_ylim()[1], f" {r.phase}",
                    fontsize=7, color="gray", va="top")
        prev_phase = r.phase

    ax.set_xlabel("update")
    ax.set_ylabel("token error rate")
    ax.set_ylim(bottom=0.0)
    ax.grid(alpha=0.3)
    ax.legend(loc="upper right", fontsize=8)

    ax2 = ax.twinx()
    ax2.step(steps, [r.lr for r in records], where="post",
             color="tab:green", alpha=0.5, linewidth=1)
    ax2.set_ylabel("learning rate", color="tab:green", fontsize=8)
    ax2.tick_params(axis="y", labelsize=7, colors="tab:green")

    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_sweep_summary(rows: list[dict], out_path) -> Path:
    """Horizontal bars of final dev TER per sweep cell, best at the top.

    Each row needs "label" and "ter"; failed cells (ter is None) are drawn
    as annotations rather than bars so they stay visible in the report.
    """
    out_path = Path(out_path)
    ok = [r for r in rows if r.get("ter") is not None]
    failed = [r for r in rows if r.get("ter") is None]
    ok.sort(key=lambda r: r["ter"])

    height = max(2.0, 0.4 * len(rows) + 1.2)
    fig, ax = plt.subplots(figsize=(7, height))
    if ok:
        labels = [r["label"] for r in ok]
        ters = [r["ter"] for r in ok]
        y = range(len(ok))
        ax.barh(y, ters, color="tab:blue", alpha=0.8)
        ax.set_yticks(list(y))
        ax.set_yticklabels(labels, fontsize=8)
        ax.invert_yaxis()
        for yi, t in zip(y, ters):
            ax.text(t, yi, f" {t:.3f}", va="center", fontsize=7)
    for i, r in enumerate(failed):
        ax.text(0.02, -(i + 1) * 0.5, f"{r['label']}: failed",
                transform=ax.transAxes, fontsize=8, color="tab:red")
    ax.set_xlabel("final dev TER")
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
