"""Matplotlib figure rendering for train/ablate reports.

Figures land next to the delimited metrics output. The Agg backend keeps
everything headless; callers only pass metric containers and file paths.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .train import RunMetrics, moving_average


def save_loss_figure(runs: dict[str, RunMetrics], path: str, window: int = 100) -> str:
    """Per-run training loss (faint) with a moving-average overlay."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for run_id, m in runs.items():
        (line,) = ax.plot(m.steps, m.loss, alpha=0.25, linewidth=0.8)
        if len(m.loss) >= window:
            ma = moving_average(m.loss, window)
            ax.plot(m.steps[window - 1:], ma, color=line.get_color(),
                    linewidth=1.6, label=run_id)
        else:
            line.set_label(run_id)
            line.set_alpha(0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_drop_rate_figure(runs: dict[str, RunMetrics], path: str) -> str:
    """Per-run dropped-slot fraction over training steps."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for run_id, m in runs.items():
        ax.plot(m.steps, m.drop_rate, linewidth=1.2, label=run_id)
    ax.set_xlabel("step")
    ax.set_ylabel("dropped slot fraction")
    ax.set_ylim(bottom=0.0)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_lr_figure(run: RunMetrics, path: str) -> str:
    """Learning-rate trace of one run (warmup + cosine)."""
    fig, ax = plt.subplots(figsize=(7.0, 3.2))
    ax.plot(run.steps, run.lr, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
