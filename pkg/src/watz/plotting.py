"""Figures for the benchmark report (rendered headless to image files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # no display needed; must precede pyplot
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import MESSAGES, MiB, PARTIES, BenchResult  # noqa: E402
from .timing import CATEGORIES  # noqa: E402

_COLORS = ("#8da0cb", "#66c2a5", "#fc8d62", "#e78ac3")

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def plot_message_costs(result: BenchResult, path) -> Path:
    """Grouped bars: one panel per party, categories per message, log scale."""
    fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8), sharey=True)
    x = np.arange(len(MESSAGES))
    width = 0.2
    for ax, party in zip(axes, PARTIES):
        for i, (cat, color) in enumerate(zip(CATEGORIES, _COLORS)):
            cells = [result.cell(party, m, cat) for m in MESSAGES]
            heights = [c.median if c.recorded else 0 for c in cells]
            errs = [c.stdev if c.recorded else 0 for c in cells]
            ax.bar(x + (i - 1.5) * width, heights, width, yerr=errs, label=cat, color=color,
                   error_kw={"elinewidth": 0.6, "capsize": 1.5})
        ax.set_xticks(x, MESSAGES)
        ax.set_title(party)
        ax.set_yscale("log")
    axes[0].set_ylabel("time [us]")
    axes[1].legend(loc="upper right", frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_msg3_scaling(result: BenchResult, path) -> Path:
    fig, ax = plt.subplots(figsize=(3.5, 2.6))
    sizes = np.array(result.blob_sizes) / MiB
    for party, marker, label in (("verifier", "o", "verifier (encrypt)"), ("attester", "s", "attester (decrypt)")):
        cells = [result.msg3[(party, s)] for s in result.blob_sizes]
        ax.errorbar(sizes, [c.median / 1000 for c in cells], yerr=[c.stdev / 1000 for c in cells],
                    marker=marker, markersize=4, linewidth=1, capsize=2, label=label)
    ax.set_xlabel("secret size [MiB]")
    ax.set_ylabel("time [ms]")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report(result: BenchResult, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        plot_message_costs(result, out / "message_costs.png"),
        plot_msg3_scaling(result, out / "msg3_scaling.png"),
    ]
