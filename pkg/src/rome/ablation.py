"""Ablation grid over weighting modes, attention designs and feature settings."""
from __future__ import annotations

import itertools
from typing import Sequence

from .data import Corpus
from .evaluation import evaluate
from .matching import WEIGHTING_MODES
from .trainer import TrainConfig, initial_model, train
from .video import DESIGNS, FEATURE_SETTINGS

AXES = {"weighting": WEIGHTING_MODES, "design": DESIGNS, "features": FEATURE_SETTINGS}


def parse_axes(spec: str) -> list[str]:
    axes = [a.strip() for a in spec.split(",") if a.strip()]
    bad = [a for a in axes if a not in AXES]
    if bad or not axes:
        raise ValueError(f"unknown ablation axes {bad or [spec]}; valid axes: {', '.join(AXES)}")
    return list(dict.fromkeys(axes))


def ablation_configs(base: TrainConfig, axes: Sequence[str]) -> list[TrainConfig]:
    """Cross product of the requested axes; other settings come from ``base``."""
    grids = [AXES[a] for a in axes]
    return [base.replace(**dict(zip(axes, combo))) for combo in itertools.product(*grids)]


def ablation_report(corpus: Corpus, configs: Sequence[TrainConfig], trained: bool = True,
                    eval_corpus: Corpus | None = None) -> list[dict]:
    """One metrics row per config (text to video); untrained rows use fresh initialisation."""
    rows = []
    for cfg in configs:
        if trained:
            model = train(corpus, cfg.replace(eval_every=0)).model
        else:
            model, _ = initial_model(corpus, cfg)
        rep = evaluate(model, eval_corpus or corpus)["text_to_video"]
        rows.append({"mode": cfg.weighting, "design": cfg.design, "features": cfg.features,
                     "r1": rep.recall_at[1], "r5": rep.recall_at[5], "r10": rep.recall_at[10],
                     "medr": rep.median_rank})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    header = ("mode", "design", "features", "R@1", "R@5", "R@10", "MedR")
    body = [(r["mode"], r["design"], r["features"], f"{r['r1']:.2f}", f"{r['r5']:.2f}", f"{r['r10']:.2f}",
             f"{r['medr']:g}") for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) if i < 3 else str(x).rjust(w) for i, (x, w) in enumerate(zip(line, widths)))
             for line in (header, *body)]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_records(rows: Sequence[dict]) -> str:
    return "".join(f"mode={r['mode']} design={r['design']} features={r['features']} r1={r['r1']:.4f} "
                   f"r5={r['r5']:.4f} r10={r['r10']:.4f} medr={r['medr']:g}\n" for r in rows)
