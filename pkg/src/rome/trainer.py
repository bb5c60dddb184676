"""Seeded mini-batch training with Adam and checkpoint round-trips."""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .checkpoint import Checkpoint, CheckpointError
from .data import Corpus, load_word_embeddings
from .evaluation import RetrievalReport, evaluate
from .matching import WEIGHTING_MODES
from .model import ModelConfig, RetrievalModel, param_shapes
from .tensor import Tensor
from .text import EmbeddingTable
from .video import DESIGNS, FEATURE_SETTINGS

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid training configuration."""


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; ``checkpoint`` is the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    margin: float = 0.2
    lr: float = 1e-4
    seed: int = 0
    weighting: str = "video_only"
    design: str = "mixed"
    features: str = "concat"
    model_dim: int = 1024
    word_dim: int = 300
    heads: int = 8
    ff_dim: int = 0
    gcn_layers: int = 2
    eval_every: int = 10
    precision: str = "float32"
    embeddings: str = ""
    embedding_seed: int = -1  # -1: reuse seed

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (the loss needs negatives)")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.weighting not in WEIGHTING_MODES:
            raise ConfigError(f"unknown weighting mode {self.weighting!r}; valid modes: {', '.join(WEIGHTING_MODES)}")
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown design {self.design!r}; valid designs: {', '.join(DESIGNS)}")
        if self.features not in FEATURE_SETTINGS:
            raise ConfigError(f"unknown feature setting {self.features!r}; valid settings: {', '.join(FEATURE_SETTINGS)}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")

    def model_config(self, corpus: Corpus | None = None) -> ModelConfig:
        extra = {}
        if corpus is not None:
            m = corpus.manifest
            extra = dict(d2=m.d2, d3=m.d3, droi=m.droi, n_roles=len(m.roles))
        try:
            return ModelConfig(model_dim=self.model_dim, word_dim=self.word_dim, heads=self.heads, ff_dim=self.ff_dim,
                               gcn_layers=self.gcn_layers, design=self.design, features=self.features,
                               weighting=self.weighting, **extra)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# -- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise tn.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * (g * g)
        state.m[name], state.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + EPS)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return state


# -- model <-> checkpoint --------------------------------------------------

def make_checkpoint(model: RetrievalModel, cfg: TrainConfig, epoch: int, rng: np.random.Generator,
                    adam: AdamState) -> Checkpoint:
    return Checkpoint(
        params={k: v.data.copy() for k, v in model.params.items()},
        config={"train": cfg.as_dict(), "model": dataclasses.asdict(model.cfg)},
        epoch=epoch,
        rng_state=copy.deepcopy(rng.bit_generator.state),
        vocabulary=list(model.vocabulary),
        adam_step=adam.step,
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
    )


def model_from_checkpoint(ckpt: Checkpoint) -> RetrievalModel:
    """Rebuild the model; parameter names are checked against the configured schema."""
    try:
        mcfg = ModelConfig(**ckpt.config["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint carries an unusable model config: {exc}") from None
    expected = dict(param_shapes(mcfg, len(ckpt.vocabulary) + 1))
    unknown = sorted(set(ckpt.params) - set(expected))
    missing = sorted(set(expected) - set(ckpt.params))
    if unknown or missing:
        raise CheckpointError(f"checkpoint parameters do not match the model: unknown keys {unknown}, "
                              f"missing keys {missing}")
    for name, shape in expected.items():
        if ckpt.params[name].shape != shape:
            raise CheckpointError(f"parameter {name} has shape {ckpt.params[name].shape}, expected {shape}")
    params = {k: Tensor(np.array(v, dtype=tn.get_dtype()), requires_grad=True, name=k)
              for k, v in ckpt.params.items()}
    return RetrievalModel(mcfg, ckpt.vocabulary, params)


def train_config_from_checkpoint(ckpt: Checkpoint) -> TrainConfig:
    try:
        return TrainConfig(**ckpt.config["train"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint carries an unusable training config: {exc}") from None


# -- training --------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    loss: float
    metrics: RetrievalReport | None = None

    def line(self) -> str:
        text = f"{self.epoch} {self.loss:.9g}"
        if self.metrics is not None:
            r = self.metrics.recall_at
            text += f" {r[1]:.4f} {r[5]:.4f} {r[10]:.4f} {self.metrics.median_rank:g}"
        return text


@dataclass
class TrainResult:
    model: RetrievalModel
    checkpoint: Checkpoint
    history: list[EpochLog]


def embedding_table(corpus: Corpus, cfg: TrainConfig) -> EmbeddingTable:
    seed = cfg.seed if cfg.embedding_seed < 0 else cfg.embedding_seed
    table = load_word_embeddings(cfg.embeddings or None, cfg.word_dim, corpus.vocabulary(), random_seed=seed)
    if cfg.embeddings:
        # restrict a loaded table to the corpus vocabulary so parameter count stays small
        vocab = corpus.vocabulary()
        rows = [0] + [table.index[t] for t in vocab if t in table.index]
        kept = [t for t in vocab if t in table.index]
        table = EmbeddingTable({t: i + 1 for i, t in enumerate(kept)}, Tensor(table.vectors.data[rows]))
    return table


def initial_model(corpus: Corpus, cfg: TrainConfig) -> tuple[RetrievalModel, np.random.Generator]:
    """Freshly initialised model and the generator positioned after initialisation."""
    rng = np.random.default_rng(cfg.seed)
    with tn.precision(cfg.precision):
        table = embedding_table(corpus, cfg)
        model = RetrievalModel.initialise(cfg.model_config(corpus), table, rng)
    return model, rng


def epoch_batches(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> list[tuple[list[int], list[int]]]:
    """Shuffled (clip indices, caption indices) batches for one epoch.

    Draws: a permutation of the clips, then one caption choice per clip in
    clip order. Every clip appears once; a trailing batch of one is dropped.
    """
    by_clip = corpus.captions_by_clip()
    order = rng.permutation(len(corpus.clips))
    choice = rng.integers(0, 1 << 31, size=len(corpus.clips))
    batches = []
    for start in range(0, len(order), batch_size):
        clips = [int(i) for i in order[start:start + batch_size] if by_clip[i]]
        if len(clips) < 2:
            continue
        caps = [by_clip[i][choice[i] % len(by_clip[i])] for i in clips]
        batches.append((clips, caps))
    return batches


def train(corpus: Corpus, cfg: TrainConfig, resume: Checkpoint | None = None, validation: Corpus | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs (continuing from ``resume`` if given)."""
    with tn.precision(cfg.precision):
        if resume is None:
            model, rng = initial_model(corpus, cfg)
            adam = AdamState()
            start = 0
        else:
            model = model_from_checkpoint(resume)
            rng = np.random.default_rng()
            rng.bit_generator.state = resume.rng_state
            adam = AdamState(resume.adam_step,
                             {k: v.astype(tn.get_dtype()) for k, v in resume.adam_m.items()},
                             {k: v.astype(tn.get_dtype()) for k, v in resume.adam_v.items()})
            start = resume.epoch
        history: list[EpochLog] = []
        last_good = make_checkpoint(model, cfg, start, rng, adam)
        params = model.params
        for epoch in range(start + 1, cfg.epochs + 1):
            losses = []
            for clip_idx, cap_idx in epoch_batches(corpus, cfg.batch_size, rng):
                with tn.Tape() as tape:
                    loss = model.batch_loss([corpus.clips[i] for i in clip_idx],
                                            [corpus.captions[j] for j in cap_idx], cfg.margin)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
                tape.backward(loss, params.values())
                optimizer_step(params, {k: p.grad for k, p in params.items()}, adam, cfg.lr)
                losses.append(value)
            entry = EpochLog(epoch, float(np.mean(losses)) if losses else float("nan"))
            if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                entry.metrics = evaluate(model, validation or corpus)["text_to_video"]
            history.append(entry)
            log.info("epoch %s", entry.line())
            if on_epoch is not None:
                on_epoch(entry)
            last_good = make_checkpoint(model, cfg, epoch, rng, adam)
    return TrainResult(model, last_good, history)
