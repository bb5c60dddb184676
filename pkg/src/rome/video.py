"""Mixture-of-expert video encoder.

The appearance (global) level sees only its own expert through a
self-attention block. The action and object levels run self-attention on
their own expert, build a context stream from the other two experts, and
then attend from the target stream into that context.

All blocks take batched sequences of shape [B, T, d].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

DESIGNS = ("mixed", "self_all")
FEATURE_SETTINGS = ("2d_only", "split", "concat")
LEVELS = ("appearance", "action", "object")


@dataclass
class ExpertFeatures:
    """Raw (pre-projection) expert sequences for one clip, each [T, D]."""

    clip_id: str
    appearance: np.ndarray
    action: np.ndarray
    object: np.ndarray

    def sequences(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.appearance, self.action, self.object


@dataclass
class VideoLevelEncodings:
    appearance: Tensor
    action: Tensor
    object: Tensor

    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.appearance, self.action, self.object


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    model_dim: int = 1024
    design: str = "mixed"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; expected one of {', '.join(DESIGNS)}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def expert_input_dims(setting: str, d2: int, d3: int, droi: int | None) -> tuple[int, int, int]:
    if setting == "2d_only":
        return d2, d2, d2
    if setting == "split":
        if not droi:
            raise ValueError("feature setting 'split' needs region-of-interest features")
        return d2, d3, droi
    if setting == "concat":
        return (d2 + d3,) * 3
    raise ValueError(f"unknown feature setting {setting!r}; expected one of {', '.join(FEATURE_SETTINGS)}")


def expert_features(clip_id: str, f2d, f3d, froi, setting: str) -> ExpertFeatures:
    """Route a clip's 2-D / 3-D / RoI vectors to the three expert inputs."""
    f2d = np.atleast_2d(np.asarray(f2d, dtype=float))
    f3d = np.atleast_2d(np.asarray(f3d, dtype=float))
    if setting == "2d_only":
        return ExpertFeatures(clip_id, f2d, f2d, f2d)
    if setting == "split":
        if froi is None:
            raise ValueError(f"clip {clip_id!r}: feature setting 'split' needs RoI features")
        return ExpertFeatures(clip_id, f2d, f3d, np.atleast_2d(np.asarray(froi, dtype=float)))
    if setting == "concat":
        both = np.concatenate([f2d, f3d], axis=-1)
        return ExpertFeatures(clip_id, both, both, both)
    raise ValueError(f"unknown feature setting {setting!r}; expected one of {', '.join(FEATURE_SETTINGS)}")


# -- building blocks -------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return tn.transpose(tn.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: Mapping[str, Tensor], prefix: str,
                         heads: int, weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads, concatenated and projected by W^O.

    Inputs are [B, T, d]; the scale is the square root of the per-head width.
    When ``weights_out`` is given, the [B, h, Tq, Tk] weight array is appended.
    """
    if q.ndim != 3 or k.shape != v.shape or q.shape[-1] != k.shape[-1] or q.shape[0] != k.shape[0]:
        raise tn.DimensionError(f"multi_head_attention: incompatible Q {q.shape}, K {k.shape}, V {v.shape}")
    if k.shape[1] < 1:
        raise tn.DimensionError("multi_head_attention: empty key sequence")
    b, tq, d = q.shape
    qh = _split_heads(tn.matmul(q, params[f"{prefix}.w_q"]), heads)
    kh = _split_heads(tn.matmul(k, params[f"{prefix}.w_k"]), heads)
    vh = _split_heads(tn.matmul(v, params[f"{prefix}.w_v"]), heads)
    scores = tn.scale(tn.matmul(qh, tn.transpose(kh)), 1.0 / math.sqrt(d // heads))
    weights = tn.softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(weights.data)
    merged = tn.reshape(tn.transpose(tn.matmul(weights, vh), (0, 2, 1, 3)), (b, tq, d))
    return tn.matmul(merged, params[f"{prefix}.w_o"])


def norm(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return tn.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def feed_forward(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    hidden = tn.relu(tn.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return tn.matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def self_block(x: Tensor, params, prefix: str, heads: int, weights_out=None) -> Tensor:
    """``Norm(MultiHead(x, x, x) + x)``."""
    return norm(multi_head_attention(x, x, x, params, f"{prefix}.attn", heads, weights_out) + x,
                params, f"{prefix}.norm")


def ff_block(x: Tensor, params, prefix: str) -> Tensor:
    """``Norm(FF(x) + x)``."""
    return norm(feed_forward(x, params, f"{prefix}.ff") + x, params, f"{prefix}.norm")


def project(raw: np.ndarray | Tensor, params, prefix: str) -> Tensor:
    return tn.matmul(tn.as_tensor(raw), params[f"{prefix}.w"]) + params[f"{prefix}.b"]


# -- levels ----------------------------------------------------------------

def encode_appearance(f_s: Tensor, params, cfg: AttentionConfig, prefix: str = "video.appearance",
                      weights_out=None) -> Tensor:
    z = self_block(f_s, params, f"{prefix}.self", cfg.heads, weights_out)
    return ff_block(z, params, f"{prefix}.out")


def fuse_context(f_x: Tensor, f_y: Tensor, params, cfg: AttentionConfig, prefix: str,
                 weights_out=None) -> Tensor:
    """Concatenate two streams along time, then a self-attention block and an FF block."""
    f = tn.concat([f_x, f_y], axis=1)
    z = self_block(f, params, f"{prefix}.fuse", cfg.heads, weights_out)
    return ff_block(z, params, f"{prefix}.fuse_out")


def encode_local_level(f_target: Tensor, f_ctx1: Tensor, f_ctx2: Tensor, params, cfg: AttentionConfig,
                       prefix: str, weights_out=None) -> Tensor:
    """Self-attention on the target expert, then cross-attention from it into the fused context.

    Queries come from the target stream ``z`` and keys/values from the
    context ``s``, so the residual ``+ z`` lines up row for row.
    """
    z = self_block(f_target, params, f"{prefix}.self", cfg.heads, weights_out)
    s = fuse_context(f_ctx1, f_ctx2, params, cfg, prefix, weights_out)
    cross = multi_head_attention(z, s, s, params, f"{prefix}.cross.attn", cfg.heads, weights_out)
    c = norm(cross + z, params, f"{prefix}.cross.norm")
    return ff_block(c, params, f"{prefix}.out")


def encode_projected(f_s: Tensor, f_a: Tensor, f_o: Tensor, params, cfg: AttentionConfig,
                     weights_out=None) -> VideoLevelEncodings:
    """Level encodings from already-projected [B, T, d] expert streams, mean-pooled over time."""
    e_s = encode_appearance(f_s, params, cfg, "video.appearance", weights_out)
    if cfg.design == "mixed":
        e_a = encode_local_level(f_a, f_s, f_o, params, cfg, "video.action", weights_out)
        e_o = encode_local_level(f_o, f_s, f_a, params, cfg, "video.object", weights_out)
    else:
        e_a = encode_appearance(f_a, params, cfg, "video.action", weights_out)
        e_o = encode_appearance(f_o, params, cfg, "video.object", weights_out)
    return VideoLevelEncodings(*(tn.mean(e, axis=1) for e in (e_s, e_a, e_o)))


def project_experts(feats: Sequence[ExpertFeatures], params) -> tuple[Tensor, Tensor, Tensor]:
    """Stack same-length clips and apply the per-expert linear projections."""
    out = []
    for level, key in zip(LEVELS, ("proj_s", "proj_a", "proj_o")):
        raw = np.stack([getattr(f, level) for f in feats], axis=0)
        out.append(project(raw, params, f"video.{key}"))
    return tuple(out)


def encode_video(feats: ExpertFeatures, cfg: AttentionConfig, params) -> VideoLevelEncodings:
    enc = encode_videos([feats], cfg, params)
    return VideoLevelEncodings(*(lvl[0] for lvl in enc.levels()))


def encode_videos(feats: Sequence[ExpertFeatures], cfg: AttentionConfig, params) -> VideoLevelEncodings:
    """Encode many clips; returns [N, d] per level in input order.

    Clips with identical sequence lengths are encoded as one batch.
    """
    groups: dict[tuple[int, int, int], list[int]] = {}
    for i, f in enumerate(feats):
        groups.setdefault(tuple(s.shape[0] for s in f.sequences()), []).append(i)
    if len(groups) == 1:
        return encode_projected(*project_experts(feats, params), params, cfg)
    parts: dict[int, tuple[Tensor, Tensor, Tensor]] = {}
    for members in groups.values():
        enc = encode_projected(*project_experts([feats[i] for i in members], params), params, cfg)
        for k, i in enumerate(members):
            parts[i] = tuple(lvl[k] for lvl in enc.levels())
    return VideoLevelEncodings(*(tn.stack([parts[i][j] for i in range(len(feats))], axis=0) for j in range(3)))


def video_param_shapes(cfg: AttentionConfig, input_dims: tuple[int, int, int], ff_dim: int) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in creation (and initialisation) order."""
    d = cfg.model_dim
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for key, din in zip(("proj_s", "proj_a", "proj_o"), input_dims):
        shapes += [(f"video.{key}.w", (din, d)), (f"video.{key}.b", (d,))]

    def attn(prefix):
        return [(f"{prefix}.w_{m}", (d, d)) for m in "qkvo"]

    def normp(prefix):
        return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]

    def ff(prefix):
        return [(f"{prefix}.w1", (d, ff_dim)), (f"{prefix}.b1", (ff_dim,)),
                (f"{prefix}.w2", (ff_dim, d)), (f"{prefix}.b2", (d,))]

    def self_b(prefix):
        return attn(f"{prefix}.attn") + normp(f"{prefix}.norm")

    def ff_b(prefix):
        return ff(f"{prefix}.ff") + normp(f"{prefix}.norm")

    shapes += self_b("video.appearance.self") + ff_b("video.appearance.out")
    for level in ("action", "object"):
        p = f"video.{level}"
        shapes += (self_b(f"{p}.self") + self_b(f"{p}.fuse") + ff_b(f"{p}.fuse_out")
                   + attn(f"{p}.cross.attn") + normp(f"{p}.cross.norm") + ff_b(f"{p}.out"))
    return shapes
