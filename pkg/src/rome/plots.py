"""Report figures written next to the text outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(history: Sequence, path) -> Path:
    """Training loss per epoch, with R@1 on a twin axis when logged."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        epochs = [h.epoch for h in history]
        ax.plot(epochs, [h.loss for h in history], color="tab:blue", lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("contrastive loss")
        evaluated = [h for h in history if h.metrics is not None]
        if evaluated:
            ax2 = ax.twinx()
            ax2.plot([h.epoch for h in evaluated], [h.metrics.recall_at[1] for h in evaluated],
                     "o-", color="tab:orange", ms=3, lw=1)
            ax2.set_ylabel("R@1 (%)")
            ax2.set_ylim(0, 100)
        return _save(fig, path)


def rank_histogram(reports: Mapping[str, object], path) -> Path:
    """Distribution of ground-truth ranks per retrieval direction."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for direction, rep in reports.items():
            ax.hist(rep.ranks, bins=min(50, max(rep.gallery_size, 1)), range=(0.5, rep.gallery_size + 0.5),
                    histtype="step", label=f"{direction} (MedR {rep.median_rank:g})")
        ax.set_xlabel("rank of ground truth")
        ax.set_ylabel("queries")
        ax.legend(frameon=False)
        return _save(fig, path)


def ablation_bars(rows: Sequence[Mapping], path) -> Path:
    """Grouped R@1/R@5/R@10 bars, one group per ablation row."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.5, 0.9 * len(rows) + 1.5), 3))
        width = 0.25
        labels = [f"{r['mode']}\n{r['design']}\n{r['features']}" for r in rows]
        for k, key in enumerate(("r1", "r5", "r10")):
            ax.bar([i + (k - 1) * width for i in range(len(rows))], [r[key] for r in rows], width,
                   label=key.upper().replace("R", "R@"))
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel("recall (%)")
        ax.legend(frameon=False)
        return _save(fig, path)
