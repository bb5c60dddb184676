"""Caption graphs and the hierarchical text encoder.

A caption is parsed into one event node (the sentence), action nodes (verbs)
and object nodes (argument phrases). Word vectors are contextualised by a
bidirectional LSTM, pooled into node embeddings, gated by the role of each
node's parent edge and refined by two residual graph-attention layers. The
three outputs are the event node and element-wise maxima over the action and
object nodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

EVENT, ACTION, OBJECT = "event", "action", "object"
KINDS = (EVENT, ACTION, OBJECT)
DEFAULT_ROLES = ("event_self", "temporal", "arg")
SELF_ROLE = 0
UNKNOWN = "<unk>"


class GraphError(ValueError):
    """A caption graph violates a structural invariant."""


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    span: tuple[int, int]


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    role: int


@dataclass(frozen=True)
class CaptionGraph:
    caption_id: str
    clip_id: str
    tokens: tuple[str, ...]
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]

    def validate(self, n_roles: int = len(DEFAULT_ROLES)) -> "CaptionGraph":
        where = f"caption {self.caption_id!r}"
        if not self.tokens:
            raise GraphError(f"{where}: empty token list")
        by_id: dict[str, Node] = {}
        for node in self.nodes:
            if node.id in by_id:
                raise GraphError(f"{where}: duplicate node id {node.id!r}")
            if node.kind not in KINDS:
                raise GraphError(f"{where}: node {node.id!r} has unknown kind {node.kind!r}")
            s, e = node.span
            if not 0 <= s < e <= len(self.tokens):
                raise GraphError(f"{where}: node {node.id!r} has empty or out-of-range span [{s}, {e})")
            by_id[node.id] = node
        events = [n for n in self.nodes if n.kind == EVENT]
        if len(events) != 1:
            raise GraphError(f"{where}: expected exactly one event node, found {len(events)}")
        for edge in self.edges:
            for end in (edge.src, edge.dst):
                if end not in by_id:
                    raise GraphError(f"{where}: edge {edge.src!r}->{edge.dst!r} references missing node {end!r}")
            if not 0 <= edge.role < n_roles:
                raise GraphError(f"{where}: edge {edge.src!r}->{edge.dst!r} has role {edge.role} "
                                 f"outside vocabulary of size {n_roles}")
        for node in self.nodes:
            targets = {by_id[e.dst].kind for e in self.edges if e.src == node.id}
            if node.kind == ACTION and EVENT not in targets:
                raise GraphError(f"{where}: action node {node.id!r} has no edge to the event node")
            if node.kind == OBJECT and ACTION not in targets:
                raise GraphError(f"{where}: object node {node.id!r} has no edge to any action node")
        return self


@dataclass
class EmbeddingTable:
    """Word vectors; row 0 is the shared unknown-token vector."""

    index: dict[str, int]
    vectors: Tensor

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, 0) for t in tokens]

    def tokens(self) -> list[str]:
        ordered = sorted(self.index.items(), key=lambda kv: kv[1])
        return [UNKNOWN] + [t for t, _ in ordered]


@dataclass
class TextLevelEncodings:
    event: Tensor
    action: Tensor
    object: Tensor

    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.event, self.action, self.object


@dataclass(frozen=True)
class PreparedGraph:
    """Content-ordered view of a graph: node kinds, spans, gate roles, adjacency."""

    n_tokens: int
    kinds: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]
    roles: tuple[int, ...]
    adjacency: np.ndarray

    @classmethod
    def from_graph(cls, graph: CaptionGraph) -> "PreparedGraph":
        # canonical order makes every downstream reduction independent of storage order
        order = sorted(graph.nodes, key=lambda n: (KINDS.index(n.kind), n.span, n.id))
        pos = {n.id: i for i, n in enumerate(order)}
        adjacency = np.zeros((len(order), len(order)), dtype=bool)
        parent_roles: dict[str, list[int]] = {}
        for edge in graph.edges:
            i, j = pos[edge.src], pos[edge.dst]
            if i != j:
                adjacency[i, j] = adjacency[j, i] = True
            parent_roles.setdefault(edge.src, []).append(edge.role)
        roles = tuple(SELF_ROLE if n.kind == EVENT else min(parent_roles[n.id]) for n in order)
        return cls(len(graph.tokens), tuple(n.kind for n in order), tuple(n.span for n in order),
                   roles, adjacency)


# -- components ------------------------------------------------------------

def embed_tokens(tokens: Sequence[str], table: EmbeddingTable) -> Tensor:
    if not tokens:
        raise ValueError("embed_tokens: empty token list")
    return tn.take_rows(table.vectors, table.rows(tokens))


def lstm_direction(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Run one LSTM direction over ``x`` of shape [B, T, D]; gates ordered i, f, o, g."""
    batch, steps, _ = x.shape
    hidden = w_h.shape[0]
    xw = tn.add(tn.matmul(x, w_x), b)
    h = c = None
    outputs = []
    for t in range(steps):
        gates = xw[:, t, :]
        if h is not None:
            gates = gates + tn.matmul(h, w_h)
        sig = tn.sigmoid(gates[:, :3 * hidden])
        cand = tn.tanh(gates[:, 3 * hidden:])
        i, f, o = sig[:, :hidden], sig[:, hidden:2 * hidden], sig[:, 2 * hidden:]
        c = i * cand if c is None else f * c + i * cand
        h = o * tn.tanh(c)
        outputs.append(h)
    return tn.stack(outputs, axis=1)


def contextualize(e: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """BiLSTM states [..., T, 2H] for word vectors of shape [T, D] or [B, T, D]."""
    single = e.ndim == 2
    x = tn.reshape(e, (1,) + e.shape) if single else e
    fwd = lstm_direction(x, params["text.lstm_fwd.w_x"], params["text.lstm_fwd.w_h"], params["text.lstm_fwd.b"])
    rev = lstm_direction(x[:, ::-1, :], params["text.lstm_bwd.w_x"], params["text.lstm_bwd.w_h"],
                         params["text.lstm_bwd.b"])
    out = tn.concat([fwd, rev[:, ::-1, :]], axis=-1)
    return out[0] if single else out


def init_node_embeddings(h: Tensor, prepared: PreparedGraph, query: Tensor) -> Tensor:
    """Node matrix [n, d]: soft attention for the event node, span max-pooling otherwise."""
    rows = []
    for kind, (s, e) in zip(prepared.kinds, prepared.spans):
        if kind == EVENT:
            alpha = tn.softmax(tn.matmul(h, tn.reshape(query, (-1, 1))), axis=0)
            rows.append(tn.sum(alpha * h, axis=0))
        else:
            rows.append(tn.max(h[s:e], axis=0))
    return tn.stack(rows, axis=0)


def one_hot(roles: Sequence[int], n_roles: int) -> np.ndarray:
    out = np.zeros((len(roles), n_roles))
    out[np.arange(len(roles)), roles] = 1.0
    return out


def role_gate(g: Tensor, r, w_r: Tensor) -> Tensor:
    """Element-wise gate ``g ⊙ W_r r`` for one node ([d], [R]) or a stack ([n, d], [n, R])."""
    r = np.asarray(r.data if isinstance(r, Tensor) else r, dtype=float)
    if r.shape[-1] != w_r.shape[1] or not (np.all((r == 0) | (r == 1)) and np.all(r.sum(axis=-1) == 1)):
        raise ValueError(f"role_gate: role vector must be one-hot of length {w_r.shape[1]}")
    if r.ndim == 1:
        return g * tn.reshape(tn.matmul(w_r, Tensor(r.reshape(-1, 1))), (-1,))
    return g * tn.matmul(Tensor(r), tn.transpose(w_r))


_MASKED = -1e9


def graph_attention_layer(g: Tensor, adjacency: np.ndarray, w_t: Tensor) -> Tensor:
    """One residual attention step over symmetric neighbourhoods.

    Weights are a softmax over neighbours of scaled dot products; nodes
    without neighbours pass through unchanged.
    """
    n, d = g.shape
    has_nb = adjacency.any(axis=1)
    scores = tn.scale(tn.matmul(g, tn.transpose(g)), 1.0 / math.sqrt(d))
    beta = tn.softmax(scores + Tensor(np.where(adjacency, 0.0, _MASKED)), axis=-1)
    update = tn.matmul(tn.matmul(beta, g), tn.transpose(w_t))
    if not has_nb.all():
        update = update * Tensor(has_nb.astype(float).reshape(-1, 1))
    return g + update


def neighbour_weights(g: Tensor, adjacency: np.ndarray) -> np.ndarray:
    """Attention weights of :func:`graph_attention_layer`, for inspection."""
    d = g.shape[1]
    scores = g.data @ g.data.T / math.sqrt(d)
    return tn.softmax(Tensor(scores + np.where(adjacency, 0.0, _MASKED)), axis=-1).data


def _pool_levels(g: Tensor, prepared: PreparedGraph) -> tuple[Tensor, Tensor, Tensor]:
    kinds = prepared.kinds
    event = g[0]
    pooled = []
    for kind in (ACTION, OBJECT):
        idx = [i for i, k in enumerate(kinds) if k == kind]
        # a graph without nodes of this kind falls back to the sentence node
        pooled.append(tn.max(tn.take_rows(g, idx), axis=0) if idx else event)
    return event, pooled[0], pooled[1]


def encode_nodes(h: Tensor, prepared: PreparedGraph, params: Mapping[str, Tensor], gcn_layers: int = 2) -> Tensor:
    g = init_node_embeddings(h, prepared, params["text.attn_query"])
    w_r = params["text.role_gates"]
    g = role_gate(g, one_hot(prepared.roles, w_r.shape[1]), w_r)
    for layer in range(1, gcn_layers + 1):
        g = graph_attention_layer(g, prepared.adjacency, params[f"text.gcn{layer}.w_t"])
    return g


def encode_text(graph: CaptionGraph, table: EmbeddingTable, params: Mapping[str, Tensor],
                gcn_layers: int = 2) -> TextLevelEncodings:
    prepared = PreparedGraph.from_graph(graph)
    h = contextualize(embed_tokens(graph.tokens, table), params)
    return TextLevelEncodings(*_pool_levels(encode_nodes(h, prepared, params, gcn_layers), prepared))


def encode_texts(graphs: Sequence[CaptionGraph], table: EmbeddingTable, params: Mapping[str, Tensor],
                 gcn_layers: int = 2) -> TextLevelEncodings:
    """Encode many captions; each level is returned as a [Q, d] stack in input order.

    Captions of equal length share one batched BiLSTM pass.
    """
    by_length: dict[int, list[int]] = {}
    for i, graph in enumerate(graphs):
        by_length.setdefault(len(graph.tokens), []).append(i)
    states: dict[int, Tensor] = {}
    for length, members in sorted(by_length.items()):
        rows = [r for i in members for r in table.rows(graphs[i].tokens)]
        words = tn.reshape(tn.take_rows(table.vectors, rows), (len(members), length, table.dim))
        h = contextualize(words, params)
        for k, i in enumerate(members):
            states[i] = h[k]
    levels = ([], [], [])
    for i, graph in enumerate(graphs):
        prepared = PreparedGraph.from_graph(graph)
        for acc, vec in zip(levels, _pool_levels(encode_nodes(states[i], prepared, params, gcn_layers), prepared)):
            acc.append(vec)
    return TextLevelEncodings(*(tn.stack(acc, axis=0) for acc in levels))
