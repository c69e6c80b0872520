"""Figure rendering for training, evaluation, and growth reports.

Renders through the Agg backend straight to PNG files with fixed sizes
and no timestamps, so rerunning a report on the same inputs reproduces
the same bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_loss_curve",
    "save_eval_curves",
    "save_growth_histogram",
]

_DPI = 110


def _finish(fig, path: str) -> str:
    fig.savefig(path, dpi=_DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def save_loss_curve(losses, path: str) -> str:
    """Mean training loss per epoch."""
    losses = list(losses)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(range(len(losses)), losses, marker="o", color="#1f6f43")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean assignment loss")
    ax.set_title("training loss")
    if losses and min(losses) > 0:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _finish(fig, path)


def save_eval_curves(points, path: str) -> str:
    """Precision, recall, and matching score against threshold."""
    points = sorted(points, key=lambda p: p.threshold)
    ts = [p.threshold for p in points]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(ts, [p.precision for p in points], marker="o", label="precision")
    ax.plot(ts, [p.recall for p in points], marker="s", label="recall")
    ax.plot(ts, [p.matching_score for p in points], marker="^", label="matching score")
    ax.set_xlabel("match confidence threshold")
    ax.set_ylabel("metric")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("association quality")
    ax.legend(loc="lower left")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _finish(fig, path)


def save_growth_histogram(report, path: str, bins: int = 20) -> str:
    """Distribution of kept growth rates with the reference and
    abscission-threshold lines."""
    rates = np.asarray(report.kept_rates, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.hist(rates, bins=bins, color="#74a892", edgecolor="#2d4a3e")
    ax.axvline(
        report.median_fastest_growth,
        color="#1f4f8f",
        linestyle="--",
        label=f"median fastest growth = {report.median_fastest_growth:.3f}",
    )
    ax.axvline(
        report.threshold,
        color="#b3412a",
        linestyle=":",
        label=f"abscission threshold = {report.threshold:.3f}",
    )
    ax.set_xlabel("growth rate (mm/day)")
    ax.set_ylabel("fruitlets")
    ax.set_title(
        f"growth rates (n={report.n_kept}, predicted abscission "
        f"{report.abscise_percent:.1f}%)"
    )
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    return _finish(fig, path)
