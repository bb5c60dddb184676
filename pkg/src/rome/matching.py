"""Three-space video/text similarity and the contrastive ranking loss."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

WEIGHTING_MODES = ("average", "text_only", "video_only", "both")
LEVEL_NAMES = ("global", "action", "object")


def check_mode(mode: str) -> str:
    if mode not in WEIGHTING_MODES:
        raise ValueError(f"unknown weighting mode {mode!r}; valid modes: {', '.join(WEIGHTING_MODES)}")
    return mode


def _unit_rows(x: Tensor, side: str, level: int) -> Tensor:
    sq = tn.sum(x * x, axis=-1, keepdims=True)
    if np.any(sq.data == 0):
        raise ZeroDivisionError(f"zero-norm {side} encoding at level {LEVEL_NAMES[level]!r}")
    return x / tn.sqrt(sq)


def level_cosine(v: Tensor, c: Tensor, level: int = 0) -> Tensor:
    """Cosine similarity of two vectors."""
    return tn.sum(_unit_rows(v, "video", level) * _unit_rows(c, "text", level))


def cosine_matrix(v: Tensor, c: Tensor, level: int = 0) -> Tensor:
    """Pairwise cosines between the rows of ``v`` [N, d] and ``c`` [M, d]."""
    return tn.matmul(_unit_rows(v, "video", level), tn.transpose(_unit_rows(c, "text", level)))


def expert_weights(levels: Sequence[Tensor], heads: Tensor) -> Tensor:
    """Softmax over the three level logits ``level_i · a_i``.

    ``levels`` holds three [N, d] (or [d]) encodings and ``heads`` is [3, d];
    the result is [N, 3] (or [3]).
    """
    logits = [tn.sum(lvl * heads[i], axis=-1, keepdims=True) for i, lvl in enumerate(levels)]
    return tn.softmax(tn.concat(logits, axis=-1), axis=-1)


def score_matrix(video: Sequence[Tensor], text: Sequence[Tensor], mode: str,
                 video_heads: Tensor, text_heads: Tensor) -> Tensor:
    """Scores S[i, j] between video i and caption j from per-level [N, d] / [M, d] stacks."""
    check_mode(mode)
    cos = [cosine_matrix(v, c, i) for i, (v, c) in enumerate(zip(video, text))]
    if mode == "average":
        return tn.scale(cos[0] + cos[1] + cos[2], 1.0 / 3.0)
    if mode in ("video_only", "both"):
        wv = expert_weights(video, video_heads)
    if mode in ("text_only", "both"):
        wt = expert_weights(text, text_heads)
    total = None
    for i in range(3):
        if mode == "video_only":
            w = wv[:, i:i + 1]
        elif mode == "text_only":
            w = tn.transpose(wt[:, i:i + 1])
        else:
            w = tn.scale(wv[:, i:i + 1] + tn.transpose(wt[:, i:i + 1]), 0.5)
        term = w * cos[i]
        total = term if total is None else total + term
    return total


def match_score(video: Sequence[Tensor], text: Sequence[Tensor], mode: str,
                video_heads: Tensor, text_heads: Tensor) -> Tensor:
    """Score of one clip against one caption, each given as three [d] level vectors."""
    rows = [tn.reshape(x, (1, -1)) for x in video]
    cols = [tn.reshape(x, (1, -1)) for x in text]
    return tn.reshape(score_matrix(rows, cols, mode, video_heads, text_heads), ())


def contrastive_loss(scores: Tensor, margin: float = 0.2) -> Tensor:
    """Hinge ranking loss over all in-batch negatives in both directions.

    ``scores[i, j]`` pairs video i with caption j; the diagonal holds the
    positives. The result is the mean over all 2·B·(B-1) hinge terms.
    """
    b = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != b:
        raise tn.DimensionError(f"contrastive_loss: expected a square score matrix, got {scores.shape}")
    if b < 2:
        raise ValueError("contrastive_loss: batch of size < 2 has no negatives")
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    eye = np.eye(b, dtype=bool)
    diag = tn.reshape(tn.sum(scores * Tensor(eye.astype(float)), axis=1), (b, 1))
    off = Tensor((~eye).astype(float))
    # rows: video i against every other caption; columns: caption i against every other video
    video_side = tn.relu(scores - diag + margin) * off
    text_side = tn.relu(tn.transpose(scores) - diag + margin) * off
    return tn.scale(tn.sum(video_side) + tn.sum(text_side), 1.0 / (2 * b * (b - 1)))
