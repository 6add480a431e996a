"""Sentence encoders: word representation, alternating BiLSTM, gated GCNs.

All functions take a :class:`~spangcn.autodiff.ParamView` so the same code
path serves training (parameters on a tape) and evaluation (constants).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, ParamView, Tensor
from .treebank import (
    COMPOSE_TYPES,
    DECOMPOSE_TYPES,
    DEP_TYPES,
    TREE_TYPES,
    UNK_LABEL,
    DependencyTree,
    SpanGraph,
)

UNK_TOKEN = "<unk>"

STAGE_TYPES = {
    "compose": COMPOSE_TYPES,
    "tree": TREE_TYPES,
    "decompose": DECOMPOSE_TYPES,
    "dep": DEP_TYPES,
}


class EncoderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabularies and frozen embeddings


class Vocab:
    """String -> index map with a reserved unknown entry at index 0."""

    def __init__(self, items: Sequence[str] = (), unk: str = UNK_LABEL):
        self.unk = unk
        self.items = [unk] + sorted(set(items) - {unk})
        self.index = {s: i for i, s in enumerate(self.items)}

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, item: str) -> int:
        return self.index.get(item, 0)

    def __contains__(self, item: str) -> bool:
        return item in self.index


class Embeddings:
    """Frozen word vectors; row 0 is the unknown-token vector."""

    def __init__(self, words: Sequence[str], matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape[0] != len(words) + 1:
            raise EncoderError("embedding matrix needs one row per word plus the unknown row")
        self.words = list(words)
        self.index = {w: i + 1 for i, w in enumerate(self.words)}
        self.matrix = matrix
        self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def lookup(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(t, 0) for t in tokens], dtype=np.intp)

    @classmethod
    def random(cls, words: Sequence[str], dim: int, rng: np.random.Generator) -> "Embeddings":
        words = sorted(set(words))
        return cls(words, rng.normal(0.0, 1.0, size=(len(words) + 1, dim)))

    @classmethod
    def load_text(cls, path, restrict_to: set[str] | None = None) -> "Embeddings":
        """Read ``token v1 ... vD`` lines (GloVe text format)."""
        words: list[str] = []
        rows: list[np.ndarray] = []
        dim = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip().split(" ")
                if len(parts) < 2:
                    continue
                word, vec = parts[0], np.array(parts[1:], dtype=np.float64)
                if dim is None:
                    dim = vec.size
                elif vec.size != dim:
                    raise EncoderError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
                if restrict_to is not None and word not in restrict_to:
                    continue
                words.append(word)
                rows.append(vec)
        if dim is None:
            raise EncoderError(f"{path}: no vectors found")
        matrix = np.vstack([np.zeros((1, dim))] + rows) if rows else np.zeros((1, dim))
        return cls(words, matrix)


# ---------------------------------------------------------------------------
# word representation


def embed_tokens(
    P: ParamView,
    tokens: Sequence[str],
    predicate_index: int,
    embeddings: Embeddings,
    training: bool = False,
    rng: np.random.Generator | None = None,
    word_dropout: float = 0.0,
    eps: float = 1e-5,
) -> Tensor:
    """x_t = [dropout(LayerNorm(w_t)); predemb(t == predicate)]."""
    n = len(tokens)
    if not 0 <= predicate_index < n:
        raise EncoderError(f"predicate index {predicate_index} out of range for {n} tokens")
    w = Tensor(embeddings.matrix[embeddings.lookup(tokens)])
    w = ad.layer_norm(w, P["embed.ln_gain"], P["embed.ln_bias"], eps)
    w = ad.dropout(w, word_dropout, rng, training)
    flag = np.zeros(n, dtype=np.intp)
    flag[predicate_index] = 1
    return ad.concat([w, ad.gather_rows(P["predemb"], flag)], axis=1)


# ---------------------------------------------------------------------------
# alternating highway BiLSTM


def init_lstm_stack(params: ModelParams, init: ad.Initializer, prefix: str, layers: int, d_in: int, hidden: int):
    d = d_in
    for k in range(layers):
        name = f"{prefix}.{k}"
        params.add(f"{name}.W_x", init.xavier(d, 4 * hidden))
        params.add(f"{name}.W_h", init.xavier(hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget gate
        params.add(f"{name}.b", b)
        params.add(f"{name}.hw_W", init.xavier(d, hidden))
        params.add(f"{name}.hw_b", np.zeros(hidden))
        if d != hidden:
            params.add(f"{name}.proj", init.xavier(d, hidden))
        d = hidden


def bilstm_encode(
    P: ParamView,
    prefix: str,
    x: Tensor,
    layers: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
    recurrent_dropout: float = 0.0,
) -> Tensor:
    """Alternating-direction LSTM stack with highway connections.

    Layer k runs left-to-right for even k and right-to-left for odd k, each
    reading the previous layer's output.  The highway output is
    ``t * lstm(x) + (1 - t) * proj(x)`` with ``t = sigmoid(x W_t + b_t)``.
    """
    if layers < 1:
        raise EncoderError("need at least one LSTM layer")
    out = x
    for k in range(layers):
        name = f"{prefix}.{k}"
        hidden = P[f"{name}.W_h"].shape[0]
        if out.shape[0] == 0:
            out = Tensor(np.zeros((0, hidden)))
            continue
        mask = None
        if training and recurrent_dropout > 0 and rng is not None:
            mask = ad.dropout_mask((hidden,), recurrent_dropout, rng)
        h = ad.lstm_layer(out, P[f"{name}.W_x"], P[f"{name}.W_h"], P[f"{name}.b"], reverse=k % 2 == 1, hidden_mask=mask)
        gate = ad.sigmoid(out @ P[f"{name}.hw_W"] + P[f"{name}.hw_b"])
        carry = out @ P[f"{name}.proj"] if f"{name}.proj" in P else out
        out = gate * h + (1.0 - gate) * carry
    return out


# ---------------------------------------------------------------------------
# gated, edge-typed GCN


@dataclass(frozen=True)
class CompiledEdges:
    """Edges of one GCN stage as index arrays, canonically sorted."""

    src: np.ndarray
    dst: np.ndarray
    coarse: np.ndarray
    fine: np.ndarray
    n_src: int
    n_dst: int

    @classmethod
    def build(cls, src, dst, coarse, fine, n_src: int, n_dst: int) -> "CompiledEdges":
        src, dst, coarse, fine = (np.asarray(a, dtype=np.intp).reshape(-1) for a in (src, dst, coarse, fine))
        order = np.lexsort((fine, src, dst, coarse))
        return cls(src[order], dst[order], coarse[order], fine[order], n_src, n_dst)

    def incidence(self) -> np.ndarray:
        a = np.zeros((self.n_dst, len(self.dst)))
        a[self.dst, np.arange(len(self.dst))] = 1.0
        return a


def init_gcn_stage(params: ModelParams, init: ad.Initializer, prefix: str, coarse_types: Sequence[str], n_labels: int, dim: int):
    for c in coarse_types:
        params.add(f"{prefix}.U[{c}]", init.xavier(dim, dim))
        params.add(f"{prefix}.ugate[{c}]", init.xavier(dim, 1))
    n_fine = len(coarse_types) * n_labels
    params.add(f"{prefix}.b", np.zeros((n_fine, dim)))
    params.add(f"{prefix}.bgate", np.zeros((n_fine, 1)))
    params.add(f"{prefix}.ln_gain", np.ones(dim))
    params.add(f"{prefix}.ln_bias", np.zeros(dim))


def gated_gcn_layer(
    P: ParamView,
    prefix: str,
    coarse_types: Sequence[str],
    states: Tensor,
    edges: CompiledEdges,
    eps: float = 1e-5,
) -> Tensor:
    """h'_v = ReLU(LayerNorm(sum_u g_vu (U_c h_u + b_f))), g_vu = sigmoid(u_c . h_u + bhat_f)."""
    if states.shape[0] != edges.n_src:
        raise EncoderError(f"{prefix}: {states.shape[0]} sender states for {edges.n_src} nodes")
    dim = states.shape[1]
    parts = []
    for c, cname in enumerate(coarse_types):
        sel = edges.coarse == c
        if not sel.any():
            continue
        hs = ad.gather_rows(states, edges.src[sel])
        msg = hs @ P[f"{prefix}.U[{cname}]"] + ad.gather_rows(P[f"{prefix}.b"], edges.fine[sel])
        gate = ad.sigmoid(hs @ P[f"{prefix}.ugate[{cname}]"] + ad.gather_rows(P[f"{prefix}.bgate"], edges.fine[sel]))
        parts.append(gate * msg)
    if parts:
        summed = Tensor(edges.incidence()) @ ad.concat(parts, axis=0)
    else:
        summed = Tensor(np.zeros((edges.n_dst, dim)))
    return ad.relu(ad.layer_norm(summed, P[f"{prefix}.ln_gain"], P[f"{prefix}.ln_bias"], eps))


def compile_span_graph(graph: SpanGraph, labels: Vocab) -> dict[str, CompiledEdges]:
    sizes = {"w": graph.word_count, "c": graph.constituent_count}
    out = {}
    for stage, ctypes in (("compose", COMPOSE_TYPES), ("tree", TREE_TYPES), ("decompose", DECOMPOSE_TYPES)):
        edges = graph.stage(stage)
        cidx = {c: i for i, c in enumerate(ctypes)}
        src = [e.source[1] for e in edges]
        dst = [e.target[1] for e in edges]
        coarse = [cidx[e.coarse] for e in edges]
        fine = [cidx[e.coarse] * len(labels) + labels[e.label] for e in edges]
        src_kind = "w" if stage == "compose" else "c"
        dst_kind = "w" if stage == "decompose" else "c"
        out[stage] = CompiledEdges.build(src, dst, coarse, fine, sizes[src_kind], sizes[dst_kind])
    return out


def compile_dependency(dep: DependencyTree, labels: Vocab) -> CompiledEdges:
    n = len(dep)
    src, dst, coarse, fine = [], [], [], []
    L = len(labels)
    for t, h in enumerate(dep.heads):
        lab = labels[dep.labels[t]]
        if h >= 0:
            src += [h, t]
            dst += [t, h]
            coarse += [0, 1]
            fine += [0 * L + lab, 1 * L + lab]
        src.append(t)
        dst.append(t)
        coarse.append(2)
        fine.append(2 * L + lab)
    return CompiledEdges.build(src, dst, coarse, fine, n, n)


# ---------------------------------------------------------------------------
# full encoders


def spangcn_encode(
    P: ParamView,
    x: Tensor,
    graph: dict[str, CompiledEdges],
    lower_layers: int,
    top_layers: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
    recurrent_dropout: float = 0.0,
    eps: float = 1e-5,
) -> Tensor:
    """Lower BiLSTM -> compose -> constituent GCN -> decompose (+ residual) -> top BiLSTM."""
    if graph["compose"].n_src != x.shape[0]:
        raise EncoderError(f"graph has {graph['compose'].n_src} words, sentence has {x.shape[0]}")
    lower = bilstm_encode(P, "lower", x, lower_layers, training, rng, recurrent_dropout)
    # constituent states start at zero; only word states feed the compose stage
    const_states = gated_gcn_layer(P, "compose", COMPOSE_TYPES, lower, graph["compose"], eps)
    const_states = gated_gcn_layer(P, "tree", TREE_TYPES, const_states, graph["tree"], eps)
    words = gated_gcn_layer(P, "decompose", DECOMPOSE_TYPES, const_states, graph["decompose"], eps)
    return bilstm_encode(P, "top", words + lower, top_layers, training, rng, recurrent_dropout)


def depgcn_encode(
    P: ParamView,
    x: Tensor,
    dep: CompiledEdges,
    lower_layers: int,
    top_layers: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
    recurrent_dropout: float = 0.0,
    eps: float = 1e-5,
) -> Tensor:
    if dep.n_src != x.shape[0]:
        raise EncoderError(f"dependency tree has {dep.n_src} words, sentence has {x.shape[0]}")
    lower = bilstm_encode(P, "lower", x, lower_layers, training, rng, recurrent_dropout)
    words = gated_gcn_layer(P, "dep", DEP_TYPES, lower, dep, eps)
    return bilstm_encode(P, "top", words + lower, top_layers, training, rng, recurrent_dropout)


def baseline_encode(
    P: ParamView,
    x: Tensor,
    layers: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
    recurrent_dropout: float = 0.0,
) -> Tensor:
    return bilstm_encode(P, "base", x, layers, training, rng, recurrent_dropout)
