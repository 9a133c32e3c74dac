"""Figure rendering for the report paths.

Training curves, the evaluation report and prediction panels are drawn
with matplotlib (Agg backend) and written next to their CSV/PGM
counterparts. CSVs stay the canonical machine-readable outputs; these
files are for eyeballing a run.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import Domain
from .metrics import METRIC_COLUMNS, MetricsReport
from .trainer import EpochRecord

plt.rcParams.update(
    {
        "figure.figsize": (9.0, 3.6),
        "figure.dpi": 110,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.labelsize": 10,
        "font.size": 9,
        "legend.fontsize": 8,
    }
)

_DOMAIN_COLOR = {Domain.MRI_LIKE: "tab:blue", Domain.CT_LIKE: "tab:orange"}


def render_curves(records: list[EpochRecord], path):
    """Two panels: per-domain loss (train solid, val dashed) and val Dice
    with the macro average."""
    epochs = [r.epoch for r in records]
    fig, (ax_loss, ax_dice) = plt.subplots(1, 2)
    for domain in (Domain.MRI_LIKE, Domain.CT_LIKE):
        color = _DOMAIN_COLOR[domain]
        ax_loss.plot(epochs, [r.train_loss[domain] for r in records], color=color,
                     label=f"{domain.tag} train")
        ax_loss.plot(epochs, [r.val_loss[domain] for r in records], color=color,
                     linestyle="--", label=f"{domain.tag} val")
        ax_dice.plot(epochs, [r.val_dice[domain] for r in records], color=color,
                     label=f"{domain.tag} val")
    ax_dice.plot(epochs, [r.macro_dice for r in records], color="black",
                 linestyle=":", label="macro")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("focal Tversky loss")
    ax_loss.legend()
    ax_dice.set_xlabel("epoch")
    ax_dice.set_ylabel("Dice")
    ax_dice.set_ylim(0.0, 1.05)
    ax_dice.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_report(report: MetricsReport, path):
    """Grouped bars of every metric per domain plus the macro average."""
    groups = [(d.tag, report.per_domain[d]) for d in report.per_domain]
    groups.append(("macro", report.macro))
    x = np.arange(len(METRIC_COLUMNS))
    width = 0.8 / len(groups)
    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    for i, (label, values) in enumerate(groups):
        vals = [values[m] for m in METRIC_COLUMNS]
        ax.bar(x + (i - (len(groups) - 1) / 2) * width, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(METRIC_COLUMNS)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_prediction_panel(image: np.ndarray, truth: np.ndarray, prob: np.ndarray, path):
    """Input slice (first channel), ground truth, and predicted probability."""
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.2))
    for ax, (title, plane) in zip(
        axes,
        [("input", image[0]), ("truth", truth[0]), ("prediction", prob[0])],
    ):
        ax.imshow(plane, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
