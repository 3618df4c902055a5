"""Figures written next to the TSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .selection import SelectionReport  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "savefig.dpi": 150,
    # keeps PNG/SVG bytes stable across runs
    "svg.hashsalt": "deskbert",
    "path.simplify": False,
}


def plot_selection(report: SelectionReport, path: str | Path, title: str | None = None) -> Path:
    """Averaged F1 over pretraining steps, per-task best runs dashed, selection marked."""
    path = Path(path)
    steps = sorted(report.averaged)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        tasks = sorted({t for per in report.per_task.values() for t in per})
        for task in tasks:
            xs = [s for s in steps if task in report.per_task[s]]
            ax.plot(xs, [100 * report.per_task[s][task] for s in xs], ls="--", lw=0.8, label=task)
        ax.plot(steps, [100 * report.averaged[s] for s in steps], color="black", lw=1.6, marker="o", ms=3, label="averaged F1")
        sel = report.selected_step
        ax.axvline(sel, color="tab:red", lw=0.8, ls=":")
        ax.annotate(
            f"selected {sel}",
            xy=(sel, 100 * report.averaged[sel]),
            xytext=(4, 6),
            textcoords="offset points",
            color="tab:red",
        )
        ax.set_xlabel("pretraining step")
        ax.set_ylabel("F1 (%)")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        metadata = {"Software": None} if path.suffix == ".png" else None
        fig.savefig(path, metadata=metadata)
        plt.close(fig)
    return path


def plot_training_log(log_path: str | Path, path: str | Path) -> Path:
    """Loss and learning rate curves from a ``step<TAB>loss<TAB>lr`` log."""
    steps, losses, lrs = [], [], []
    for line in Path(log_path).read_text(encoding="utf-8").splitlines():
        s, loss, lr = line.split("\t")[:3]
        steps.append(int(s))
        losses.append(float(loss))
        lrs.append(float(lr))
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, losses, lw=0.6, color="tab:blue")
        ax.set_xlabel("step")
        ax.set_ylabel("training loss", color="tab:blue")
        twin = ax.twinx()
        twin.plot(steps, lrs, lw=0.8, color="tab:gray")
        twin.set_ylabel("learning rate", color="tab:gray")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
        plt.close(fig)
    return path
