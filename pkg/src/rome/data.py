"""Corpus files, a shallow caption parser and synthetic corpus generation.

A corpus directory holds ``features.jsonl`` (one clip per line),
``captions.jsonl`` (one caption graph per line) and ``manifest.txt``
(``key = value`` lines).
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .text import (ACTION, DEFAULT_ROLES, EVENT, OBJECT, CaptionGraph, Edge, EmbeddingTable, GraphError,
                   Node, UNKNOWN)
from . import tensor as tn

log = logging.getLogger(__name__)

FEATURES_FILE = "features.jsonl"
CAPTIONS_FILE = "captions.jsonl"
MANIFEST_FILE = "manifest.txt"

TEMPORAL_ROLE = 1
ARG_ROLE = 2


class DataError(ValueError):
    """A corpus file is malformed or inconsistent."""


@dataclass
class ClipRecord:
    clip_id: str
    feature_2d: np.ndarray
    feature_3d: np.ndarray
    feature_roi: np.ndarray | None = None


@dataclass
class CorpusManifest:
    split: str = "train"
    clips: int = 0
    captions: int = 0
    d2: int = 0
    d3: int = 0
    droi: int = 0
    roles: tuple[str, ...] = DEFAULT_ROLES
    seed: int | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        items = [("split", self.split), ("clips", self.clips), ("captions", self.captions),
                 ("d2", self.d2), ("d3", self.d3), ("droi", self.droi), ("roles", ",".join(self.roles))]
        if self.seed is not None:
            items.append(("seed", self.seed))
        items += sorted(self.extra.items())
        return "".join(f"{k} = {v}\n" for k, v in items)

    @classmethod
    def from_text(cls, text: str) -> "CorpusManifest":
        values = parse_key_values(text, "manifest")
        m = cls()
        try:
            m.split = values.pop("split", "train")
            m.clips = int(values.pop("clips", 0))
            m.captions = int(values.pop("captions", 0))
            m.d2 = int(values.pop("d2", 0))
            m.d3 = int(values.pop("d3", 0))
            m.droi = int(values.pop("droi", 0))
            roles = values.pop("roles", None)
            m.roles = tuple(r.strip() for r in roles.split(",")) if roles else DEFAULT_ROLES
            seed = values.pop("seed", None)
            m.seed = int(seed) if seed is not None else None
        except ValueError as exc:
            raise DataError(f"manifest: {exc}") from None
        m.extra = values
        return m


def parse_key_values(text: str, what: str = "file") -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{what} line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise DataError(f"{what} line {lineno}: empty key")
        out[key] = value
    return out


@dataclass
class Corpus:
    clips: list[ClipRecord]
    captions: list[CaptionGraph]
    manifest: CorpusManifest

    def __post_init__(self):
        self._clip_index = {c.clip_id: i for i, c in enumerate(self.clips)}
        for cap in self.captions:
            if cap.clip_id not in self._clip_index:
                raise DataError(f"caption {cap.caption_id!r} references unknown clip {cap.clip_id!r}")

    def clip_index(self, clip_id: str) -> int:
        return self._clip_index[clip_id]

    def truth(self) -> list[int]:
        """Gallery index of the clip each caption describes."""
        return [self._clip_index[c.clip_id] for c in self.captions]

    def captions_by_clip(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.clips]
        for j, cap in enumerate(self.captions):
            out[self._clip_index[cap.clip_id]].append(j)
        return out

    def vocabulary(self) -> list[str]:
        return sorted({t for c in self.captions for t in c.tokens})

    def subset(self, clip_indices: Sequence[int]) -> "Corpus":
        keep = [self.clips[i] for i in clip_indices]
        ids = {c.clip_id for c in keep}
        caps = [c for c in self.captions if c.clip_id in ids]
        m = CorpusManifest(self.manifest.split, len(keep), len(caps), self.manifest.d2, self.manifest.d3,
                           self.manifest.droi, self.manifest.roles, self.manifest.seed, dict(self.manifest.extra))
        return Corpus(keep, caps, m)


# -- features --------------------------------------------------------------

def _float_list(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"{what}: expected a flat list of numbers")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what}: non-finite value")
    return arr


def load_features(path, dims: tuple[int, int, int] | None = None) -> list[ClipRecord]:
    """Read clip records; ``dims`` = (d2, d3, droi) from the manifest, droi 0 meaning absent."""
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line, parse_constant=_reject_constant)
                clip_id = str(obj["clip_id"])
                f2d = _float_list(obj["f2d"], f"{where} f2d")
                f3d = _float_list(obj["f3d"], f"{where} f3d")
                froi = obj.get("froi")
                froi = None if froi is None else _float_list(froi, f"{where} froi")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, DataError):
                    raise
                raise DataError(f"{where}: malformed record ({exc})") from None
            if clip_id in seen:
                raise DataError(f"{where}: duplicate clip_id {clip_id!r}")
            seen.add(clip_id)
            if dims is not None:
                d2, d3, droi = dims
                if f2d.size != d2 or f3d.size != d3 or (droi and (froi is None or froi.size != droi)):
                    raise DataError(f"{where}: feature dimensions {f2d.size}/{f3d.size}/"
                                    f"{None if froi is None else froi.size} do not match header {d2}/{d3}/{droi}")
            records.append(ClipRecord(clip_id, f2d, f3d, froi))
    return records


def _reject_constant(name: str):
    raise DataError(f"non-finite value {name}")


def format_float(x: float) -> float:
    """Round to 9 significant digits so the decimal text reproduces a float32 exactly."""
    return float(format(float(x), ".9g"))


def _floats(arr: np.ndarray) -> list[float]:
    return [format_float(x) for x in np.asarray(arr).reshape(-1)]


def dump_features(records: Iterable[ClipRecord]) -> str:
    lines = []
    for r in records:
        obj = {"clip_id": r.clip_id, "f2d": _floats(r.feature_2d), "f3d": _floats(r.feature_3d),
               "froi": None if r.feature_roi is None else _floats(r.feature_roi)}
        lines.append(json.dumps(obj, allow_nan=False))
    return "".join(line + "\n" for line in lines)


# -- captions --------------------------------------------------------------

def graph_to_record(g: CaptionGraph) -> dict:
    return {"caption_id": g.caption_id, "clip_id": g.clip_id, "tokens": list(g.tokens),
            "nodes": [{"id": n.id, "kind": n.kind, "span": list(n.span)} for n in g.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "role": e.role} for e in g.edges]}


def graph_from_record(obj: dict) -> CaptionGraph:
    return CaptionGraph(
        caption_id=str(obj["caption_id"]),
        clip_id=str(obj["clip_id"]),
        tokens=tuple(str(t) for t in obj["tokens"]),
        nodes=tuple(Node(str(n["id"]), str(n["kind"]), (int(n["span"][0]), int(n["span"][1])))
                    for n in obj["nodes"]),
        edges=tuple(Edge(str(e["src"]), str(e["dst"]), int(e["role"])) for e in obj["edges"]),
    )


def load_caption_graphs(path, role_vocab: Sequence[str] = DEFAULT_ROLES) -> list[CaptionGraph]:
    graphs = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                graph = graph_from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
                raise DataError(f"{where}: malformed caption record ({exc})") from None
            try:
                graph.validate(len(role_vocab))
            except GraphError as exc:
                raise DataError(f"{where}: {exc}") from None
            if graph.caption_id in seen:
                raise DataError(f"{where}: duplicate caption_id {graph.caption_id!r}")
            seen.add(graph.caption_id)
            graphs.append(graph)
    return graphs


def dump_captions(graphs: Iterable[CaptionGraph]) -> str:
    return "".join(json.dumps(graph_to_record(g)) + "\n" for g in graphs)


def rule_parse_caption(tokens: Sequence[str], verbs: Iterable[str], caption_id: str = "c0",
                       clip_id: str = "v0") -> CaptionGraph:
    """Shallow deterministic parse standing in for a semantic role labeller.

    Lexicon verbs become action nodes linked to the event node in order. Each
    maximal run of other tokens becomes one object node linked to the verb
    before it; a leading run attaches to the first verb. Without any verb the
    graph gets one dummy action and one object, both spanning the caption.
    """
    tokens = tuple(tokens)
    if not tokens:
        raise ValueError("rule_parse_caption: empty token list")
    lexicon = set(verbs)
    n = len(tokens)
    nodes = [Node("e", EVENT, (0, n))]
    edges: list[Edge] = []
    verb_pos = [i for i, t in enumerate(tokens) if t in lexicon]
    if not verb_pos:
        nodes += [Node("a0", ACTION, (0, n)), Node("o0", OBJECT, (0, n))]
        edges += [Edge("a0", "e", TEMPORAL_ROLE), Edge("o0", "a0", ARG_ROLE)]
        return CaptionGraph(caption_id, clip_id, tokens, tuple(nodes), tuple(edges))
    for k, i in enumerate(verb_pos):
        nodes.append(Node(f"a{k}", ACTION, (i, i + 1)))
        edges.append(Edge(f"a{k}", "e", TEMPORAL_ROLE))
    runs: list[tuple[int, int]] = []
    start = None
    for i in range(n + 1):
        is_word = i < n and tokens[i] not in lexicon
        if is_word and start is None:
            start = i
        elif not is_word and start is not None:
            runs.append((start, i))
            start = None
    for k, (s, e) in enumerate(runs):
        owner = max((j for j, v in enumerate(verb_pos) if v < s), default=0)
        nodes.append(Node(f"o{k}", OBJECT, (s, e)))
        edges.append(Edge(f"o{k}", f"a{owner}", ARG_ROLE))
    return CaptionGraph(caption_id, clip_id, tokens, tuple(nodes), tuple(edges))


# -- corpus directories ----------------------------------------------------

def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.exists():
        raise DataError(f"{directory}: no {MANIFEST_FILE}")
    manifest = CorpusManifest.from_text(manifest_path.read_text(encoding="utf-8"))
    clips = load_features(directory / FEATURES_FILE, (manifest.d2, manifest.d3, manifest.droi))
    captions = load_caption_graphs(directory / CAPTIONS_FILE, manifest.roles)
    if manifest.clips and manifest.clips != len(clips):
        raise DataError(f"{directory}: manifest lists {manifest.clips} clips, file has {len(clips)}")
    if manifest.captions and manifest.captions != len(captions):
        raise DataError(f"{directory}: manifest lists {manifest.captions} captions, file has {len(captions)}")
    return Corpus(clips, captions, manifest)


def write_corpus(corpus: Corpus, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / FEATURES_FILE).write_text(dump_features(corpus.clips), encoding="utf-8")
    (directory / CAPTIONS_FILE).write_text(dump_captions(corpus.captions), encoding="utf-8")
    (directory / MANIFEST_FILE).write_text(corpus.manifest.to_text(), encoding="utf-8")


# -- synthetic corpora -----------------------------------------------------

FUNCTION_WORDS = ("the", "a", "some", "with", "and", "then")
_VERB_STEMS = ("slice", "chop", "mix", "stir", "pour", "add", "boil", "fry", "bake", "peel",
               "grate", "whisk", "season", "drain", "roll", "spread", "knead", "grill", "mash", "fold")
_NOUN_STEMS = ("onion", "garlic", "tomato", "pepper", "carrot", "potato", "butter", "flour", "egg", "rice",
               "noodle", "cheese", "chicken", "beef", "salt", "oil", "sauce", "dough", "lemon", "herb")
# (leading run, verb, run between) templates; all produce six tokens
_TEMPLATES = (
    lambda v, n, d: [v, "the", n, "with", "the", d],
    lambda v, n, d: ["then", v, "some", n, "and", d],
    lambda v, n, d: [v, "a", d, "and", "the", n],
    lambda v, n, d: ["then", v, "the", n, "with", d],
)


def _word_list(stems: Sequence[str], count: int) -> list[str]:
    words = []
    for i in range(count):
        stem = stems[i % len(stems)]
        words.append(stem if i < len(stems) else f"{stem}{i // len(stems)}")
    return words


def synthetic_lexicon(vocab_size: int) -> tuple[list[str], list[str]]:
    """Verbs and nouns of the closed synthetic vocabulary (function words excluded)."""
    content = vocab_size - len(FUNCTION_WORDS)
    if content < 3:
        raise ValueError(f"vocab_size must be at least {len(FUNCTION_WORDS) + 3}")
    n_verbs = content // 2
    return _word_list(_VERB_STEMS, n_verbs), _word_list(_NOUN_STEMS, content - n_verbs)


def synth_corpus(seed: int, n_clips: int, d2: int = 2048, d3: int = 2048, vocab_size: int = 64,
                 n_classes: int | None = None, captions_per_clip: int = 1, noise: float = 0.5,
                 droi: int | None = None) -> Corpus:
    """Generate a corpus with planted clip/caption structure.

    Each latent class owns one (verb, noun) pair and random 2-D / 3-D / RoI
    centroids; a clip's features are its class centroids plus Gaussian noise
    of scale ``noise``. Captions name the class verb and noun plus a detail
    noun that is distinct among the clips of a class.

    Draw order from ``default_rng(seed)``: class-pair permutation, per-class
    detail permutations, then for each class the 2-D, 3-D and RoI centroids,
    then for each clip the 2-D, 3-D and RoI noise.
    """
    if n_clips < 2:
        raise ValueError("synth_corpus needs at least 2 clips")
    if captions_per_clip < 1:
        raise ValueError("captions_per_clip must be at least 1")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    droi = d2 if droi is None else droi
    n_classes = n_clips if n_classes is None else n_classes
    if not 1 <= n_classes <= n_clips:
        raise ValueError(f"n_classes must lie in [1, {n_clips}]")
    verbs, nouns = synthetic_lexicon(vocab_size)
    pair_capacity = len(verbs) * len(nouns)
    per_class = math.ceil(n_clips / n_classes)
    if n_classes > pair_capacity or per_class > len(nouns) - 1:
        raise ValueError(
            f"{n_clips} clips in {n_classes} classes exceed the capacity of a {vocab_size}-word vocabulary "
            f"({pair_capacity} verb/noun classes, {len(nouns) - 1} distinct captions per class)")

    rng = np.random.default_rng(seed)
    pairs = rng.permutation(pair_capacity)[:n_classes]
    details = [rng.permutation(len(nouns)) for _ in range(n_classes)]
    centroids = [tuple(rng.standard_normal(d).astype(np.float32) for d in (d2, d3, droi))
                 for _ in range(n_classes)]

    clips, captions = [], []
    width = max(4, len(str(n_clips - 1)))
    for i in range(n_clips):
        cls, slot = i % n_classes, i // n_classes
        verb, noun = verbs[pairs[cls] // len(nouns)], nouns[pairs[cls] % len(nouns)]
        detail = [nouns[k] for k in details[cls] if nouns[k] != noun][slot]
        clip_id = f"clip{i:0{width}d}"
        feats = [(c + np.float32(noise) * rng.standard_normal(c.size).astype(np.float32)).astype(np.float32)
                 for c in centroids[cls]]
        clips.append(ClipRecord(clip_id, *feats))
        for k in range(captions_per_clip):
            tokens = _TEMPLATES[k % len(_TEMPLATES)](verb, noun, detail)
            captions.append(rule_parse_caption(tokens, verbs, f"{clip_id}_c{k}", clip_id))
    manifest = CorpusManifest("synthetic", n_clips, len(captions), d2, d3, droi, DEFAULT_ROLES, seed,
                              {"classes": str(n_classes), "noise": format(noise, ".9g"),
                               "vocab_size": str(vocab_size), "verbs": ",".join(verbs)})
    # round-trip through the file precision so in-memory and on-disk corpora agree exactly
    for c in clips:
        for attr in ("feature_2d", "feature_3d", "feature_roi"):
            setattr(c, attr, np.asarray(_floats(getattr(c, attr)), dtype=np.float64))
    return Corpus(clips, captions, manifest)


# -- word embeddings -------------------------------------------------------

def load_word_embeddings(path=None, dim: int = 300, vocabulary: Sequence[str] = (),
                         random_seed: int | None = None) -> EmbeddingTable:
    """GloVe-style ``token f1 … f_dim`` file, or a seeded uniform(-0.1, 0.1) table.

    Without a file, ``random_seed`` is required and the table covers
    ``vocabulary`` (sorted); row 0 is the unknown-token vector. A file's
    unknown row is zero. Later duplicates of a token override earlier ones.
    """
    if path is not None and os.path.exists(path):
        index: dict[str, int] = {}
        rows: list[np.ndarray] = [np.zeros(dim)]
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split()
                if not parts:
                    continue
                if len(parts) != dim + 1:
                    raise DataError(f"{path}:{lineno}: expected token plus {dim} values, got {len(parts) - 1} values")
                try:
                    vec = np.array([float(x) for x in parts[1:]])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value") from None
                if not np.all(np.isfinite(vec)):
                    raise DataError(f"{path}:{lineno}: non-finite value")
                token = parts[0]
                if token in index:
                    log.warning("%s:%d: duplicate token %r; keeping the later vector", path, lineno, token)
                    rows[index[token]] = vec
                else:
                    index[token] = len(rows)
                    rows.append(vec)
        return EmbeddingTable(index, tn.Tensor(np.stack(rows)))
    if path is not None and random_seed is None:
        raise DataError(f"embedding file {path} does not exist and no random seed was given")
    if random_seed is None:
        raise DataError("either an embedding file or a random seed is required")
    vocab = sorted(set(vocabulary) - {UNKNOWN})
    rng = np.random.default_rng(random_seed)
    vectors = rng.uniform(-0.1, 0.1, size=(len(vocab) + 1, dim))
    return EmbeddingTable({t: i + 1 for i, t in enumerate(vocab)}, tn.Tensor(vectors))
