"""Retrieval ranking and R@k / MedR metrics, plus a brute-force reference."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Corpus

DIRECTIONS = ("text_to_video", "video_to_text")
DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    direction: str
    gallery_size: int
    ranks: list[int]
    recall_at: dict[int, float] = field(default_factory=dict)
    median_rank: float = 0.0

    @property
    def queries(self) -> int:
        return len(self.ranks)

    def as_dict(self) -> dict[str, float | int | str]:
        out: dict[str, float | int | str] = {"direction": self.direction, "gallery": self.gallery_size,
                                             "queries": self.queries}
        for k, v in self.recall_at.items():
            out[f"r{k}"] = round(v, 4)
        out["medr"] = self.median_rank
        return out

    def summary(self) -> str:
        recalls = " ".join(f"R@{k}={v:.2f}" for k, v in self.recall_at.items())
        return (f"{self.direction}: gallery={self.gallery_size} queries={self.queries} "
                f"{recalls} MedR={self.median_rank:g}")


def ranks_from_scores(scores: np.ndarray, truth: Sequence[int]) -> list[int]:
    """1 + number of gallery items scoring at least the truth, excluding the truth itself.

    Ties count against the query.
    """
    scores = np.asarray(scores)
    truth = np.asarray(truth)
    if truth.shape != (scores.shape[0],):
        raise ValueError(f"need one ground-truth index per query: {scores.shape[0]} queries, {truth.size} labels")
    if np.any((truth < 0) | (truth >= scores.shape[1])):
        raise ValueError("ground-truth index outside the gallery")
    target = scores[np.arange(scores.shape[0]), truth][:, None]
    return (np.sum(scores >= target, axis=1)).astype(int).tolist()


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if len(ranks) == 0:
        raise ValueError("recall_at_k: no ranks")
    return 100.0 * sum(1 for r in ranks if r <= k) / len(ranks)


def median_rank(ranks: Sequence[int]) -> int:
    """Lower median: the element at 1-based position ceil(Q/2) of the sorted ranks."""
    if len(ranks) == 0:
        raise ValueError("median_rank: no ranks")
    ordered = sorted(ranks)
    return int(ordered[math.ceil(len(ordered) / 2) - 1])


def report(ranks: Sequence[int], direction: str, gallery_size: int, ks=DEFAULT_KS) -> RetrievalReport:
    return RetrievalReport(direction, gallery_size, list(ranks),
                           {k: recall_at_k(ranks, k) for k in ks}, median_rank(ranks))


def oracle_metrics(scores: np.ndarray, truth: Sequence[int], direction: str = "text_to_video",
                   ks=DEFAULT_KS) -> RetrievalReport:
    """Reference metrics by sorting each row; used to check the fast path."""
    scores = np.asarray(scores)
    ranks = []
    for q, row in enumerate(scores):
        # descending score, truth last among equals: the pessimistic position
        order = sorted(range(len(row)), key=lambda n: (-row[n], n == truth[q]))
        ranks.append(order.index(truth[q]) + 1)
    recalls = {}
    for k in ks:
        hits = 0
        for r in ranks:
            if r <= k:
                hits += 1
        recalls[k] = hits * 100.0 / len(ranks)
    ordered = sorted(ranks)
    half = len(ordered) // 2 + len(ordered) % 2
    return RetrievalReport(direction, scores.shape[1], ranks, recalls, ordered[half - 1])


def retrieval_problem(corpus: Corpus, direction: str) -> tuple[list[int], list[int], list[int]]:
    """(query items, gallery items, truth) for one direction.

    Text to video: every caption queries the clips. Video to text: every clip
    queries a gallery holding its first caption.
    """
    if direction == "text_to_video":
        return list(range(len(corpus.captions))), list(range(len(corpus.clips))), corpus.truth()
    if direction == "video_to_text":
        firsts = [caps[0] for caps in corpus.captions_by_clip() if caps]
        if len(firsts) != len(corpus.clips):
            raise ValueError("video_to_text needs at least one caption per clip")
        return list(range(len(corpus.clips))), firsts, list(range(len(corpus.clips)))
    raise ValueError(f"unknown direction {direction!r}; expected one of {', '.join(DIRECTIONS)}")


def score_matrix(model, corpus: Corpus, direction: str = "text_to_video", mode: str | None = None,
                 encodings=None) -> tuple[np.ndarray, list[int]]:
    """Query-by-gallery scores and ground truth for ``direction``.

    ``encodings`` may carry precomputed (video, text) level encodings of the
    whole corpus.
    """
    queries, gallery, truth = retrieval_problem(corpus, direction)
    if encodings is None:
        encodings = (model.encode_videos(corpus.clips), model.encode_texts(corpus.captions))
    video, text = encodings
    s = model.scores(video, text, mode).data
    if direction == "text_to_video":
        return np.array(s.T, dtype=np.float64), truth
    return np.array(s[:, gallery], dtype=np.float64), truth


def evaluate(model, corpus: Corpus, directions=("text_to_video",), mode: str | None = None,
             split_gallery: int | None = None, ks=DEFAULT_KS) -> dict[str, RetrievalReport]:
    """Rank and score ``corpus`` in each direction.

    With ``split_gallery`` = G the clips are cut into consecutive galleries of
    G clips (the last may be smaller) and ranks are pooled across galleries.
    """
    chunks = [list(range(len(corpus.clips)))]
    if split_gallery:
        n = len(corpus.clips)
        chunks = [list(range(s, min(s + split_gallery, n))) for s in range(0, n, split_gallery)]
    reports = {}
    pooled = {d: [] for d in directions}
    for chunk in chunks:
        part = corpus if len(chunks) == 1 else corpus.subset(chunk)
        enc = (model.encode_videos(part.clips), model.encode_texts(part.captions))
        for d in directions:
            s, truth = score_matrix(model, part, d, mode, enc)
            pooled[d].extend(ranks_from_scores(s, truth))
    for d in directions:
        size = min(split_gallery, len(corpus.clips)) if split_gallery else len(corpus.clips)
        reports[d] = report(pooled[d], d, size, ks)
    return reports


def metrics_text(reports: Mapping[str, RetrievalReport]) -> str:
    """``key = value`` lines for a metrics file."""
    lines = []
    for d, r in reports.items():
        for key, value in r.as_dict().items():
            if key != "direction":
                lines.append(f"{d}.{key} = {value}")
    return "".join(line + "\n" for line in lines)
