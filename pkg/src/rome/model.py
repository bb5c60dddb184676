"""Model configuration, parameter initialisation and end-to-end scoring."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import ClipRecord, Corpus
from .matching import WEIGHTING_MODES, check_mode, contrastive_loss, score_matrix
from .tensor import Tensor
from .text import DEFAULT_ROLES, CaptionGraph, EmbeddingTable, TextLevelEncodings, encode_texts
from .video import (DESIGNS, FEATURE_SETTINGS, AttentionConfig, VideoLevelEncodings, encode_videos,
                    expert_features, expert_input_dims, video_param_shapes)


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 1024
    word_dim: int = 300
    heads: int = 8
    ff_dim: int = 0  # 0 means 2 * model_dim
    gcn_layers: int = 2
    n_roles: int = len(DEFAULT_ROLES)
    design: str = "mixed"
    features: str = "concat"
    weighting: str = "video_only"
    d2: int = 2048
    d3: int = 2048
    droi: int = 0

    def __post_init__(self):
        if self.model_dim < 2 or self.model_dim % 2:
            raise ValueError(f"model_dim must be an even number >= 2, got {self.model_dim}")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; valid designs: {', '.join(DESIGNS)}")
        if self.features not in FEATURE_SETTINGS:
            raise ValueError(f"unknown feature setting {self.features!r}; valid settings: {', '.join(FEATURE_SETTINGS)}")
        check_mode(self.weighting)
        if self.gcn_layers < 0:
            raise ValueError("gcn_layers must be non-negative")

    @property
    def ff_width(self) -> int:
        return self.ff_dim or 2 * self.model_dim

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.heads, self.model_dim, self.design)

    def input_dims(self) -> tuple[int, int, int]:
        return expert_input_dims(self.features, self.d2, self.d3, self.droi)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def param_shapes(cfg: ModelConfig, vocab_rows: int) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter's name and shape, in initialisation order."""
    d, h = cfg.model_dim, cfg.model_dim // 2
    shapes = [("text.embed", (vocab_rows, cfg.word_dim))]
    for direction in ("fwd", "bwd"):
        shapes += [(f"text.lstm_{direction}.w_x", (cfg.word_dim, 4 * h)),
                   (f"text.lstm_{direction}.w_h", (h, 4 * h)),
                   (f"text.lstm_{direction}.b", (4 * h,))]
    shapes += [("text.attn_query", (d,)), ("text.role_gates", (d, cfg.n_roles))]
    shapes += [(f"text.gcn{layer}.w_t", (d, d)) for layer in range(1, cfg.gcn_layers + 1)]
    shapes += video_param_shapes(cfg.attention, cfg.input_dims(), cfg.ff_width)
    shapes += [("match.video_heads", (3, d)), ("match.text_heads", (3, d))]
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "text.role_gates":
        return shape[1]
    if len(shape) == 1:
        return shape[0]
    return shape[0] if not name.startswith("match.") else shape[1]


def init_params(cfg: ModelConfig, table: EmbeddingTable, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters drawn from ``rng`` in :func:`param_shapes` order.

    Weight matrices and the attention query / head vectors are uniform in
    ±1/sqrt(fan_in); biases are zero; norm gains are one. The embedding table
    is copied from ``table`` and consumes no draws.
    """
    if table.dim != cfg.word_dim:
        raise ValueError(f"embedding width {table.dim} does not match word_dim {cfg.word_dim}")
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg, table.vectors.shape[0]):
        if name == "text.embed":
            value = np.array(table.vectors.data, dtype=np.float64)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith((".bias", ".b", ".b1", ".b2")):
            value = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


class RetrievalModel:
    """Text encoder, video encoder and matching head over one parameter set."""

    def __init__(self, cfg: ModelConfig, vocabulary: Sequence[str], params: dict[str, Tensor]):
        self.cfg = cfg
        self.vocabulary = list(vocabulary)
        self.params = params
        self.table = EmbeddingTable({t: i + 1 for i, t in enumerate(self.vocabulary)}, params["text.embed"])
        expected = dict(param_shapes(cfg, len(self.vocabulary) + 1))
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            unknown = sorted(set(params) - set(expected))
            raise KeyError(f"parameter set mismatch: missing {missing}, unknown {unknown}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name}: shape {params[name].shape}, expected {shape}")

    @classmethod
    def initialise(cls, cfg: ModelConfig, table: EmbeddingTable, rng: np.random.Generator) -> "RetrievalModel":
        vocab = table.tokens()[1:]
        return cls(cfg, vocab, init_params(cfg, table, rng))

    def astype(self, dtype_name: str) -> "RetrievalModel":
        """Copy of the model with parameters converted to the given scalar type."""
        with tn.precision(dtype_name):
            params = {k: Tensor(np.array(v.data, dtype=tn.get_dtype()), requires_grad=True, name=k)
                      for k, v in self.params.items()}
        return RetrievalModel(self.cfg, self.vocabulary, params)

    def encode_texts(self, graphs: Sequence[CaptionGraph]) -> TextLevelEncodings:
        return encode_texts(graphs, self.table, self.params, self.cfg.gcn_layers)

    def expert_features(self, clips: Sequence[ClipRecord]):
        return [expert_features(c.clip_id, c.feature_2d, c.feature_3d, c.feature_roi, self.cfg.features)
                for c in clips]

    def encode_videos(self, clips: Sequence[ClipRecord]) -> VideoLevelEncodings:
        return encode_videos(self.expert_features(clips), self.cfg.attention, self.params)

    def scores(self, video: VideoLevelEncodings, text: TextLevelEncodings, mode: str | None = None) -> Tensor:
        """S[i, j] for video i against caption j."""
        return score_matrix(video.levels(), text.levels(), mode or self.cfg.weighting,
                            self.params["match.video_heads"], self.params["match.text_heads"])

    def batch_loss(self, clips: Sequence[ClipRecord], graphs: Sequence[CaptionGraph], margin: float) -> Tensor:
        return contrastive_loss(self.scores(self.encode_videos(clips), self.encode_texts(graphs)), margin)


def model_from_corpus(corpus: Corpus, cfg: ModelConfig, table: EmbeddingTable,
                      rng: np.random.Generator) -> RetrievalModel:
    m = corpus.manifest
    return RetrievalModel.initialise(cfg.replace(d2=m.d2, d3=m.d3, droi=m.droi, n_roles=len(m.roles)), table, rng)


__all__ = ["ModelConfig", "RetrievalModel", "init_params", "param_shapes", "model_from_corpus", "WEIGHTING_MODES"]
