"""PNG figures for energy reports (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def compare_figure(rows: list[dict], path) -> Path:
    """Bar chart of average current per scenario, annotated with the ratio to the first bar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(rows) + 1.5), 3.2))
        names = [r["scenario"] for r in rows]
        values = [r["avg_current_ma"] for r in rows]
        bars = ax.bar(names, values, color="#4c72b0", width=0.6)
        for bar, r in zip(bars, rows):
            ax.annotate(f"{r['ratio']:.2f}x", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                        ha="center", va="bottom", fontsize=7, xytext=(0, 2), textcoords="offset points")
        ax.set_ylabel("average current (mA)")
        ax.set_ylim(0, max(values) * 1.15 if values else 1)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def sweep_figure(rows: list[dict], path, params=None) -> Path:
    """Average current against polling interval on a log axis."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        xs = [r["interval_ms"] for r in rows]
        ax.plot(xs, [r["avg_current_ma"] for r in rows], marker="o", ms=3, color="#dd8452")
        ax.set_xscale("log")
        ax.set_xlabel("polling interval (ms)")
        ax.set_ylabel("average current (mA)")
        if params is not None:
            ax.axhline(params.awake_ma, ls="--", lw=0.8, color="0.4")
            ax.text(xs[-1], params.awake_ma, " held awake, idle", va="bottom", ha="right", fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
