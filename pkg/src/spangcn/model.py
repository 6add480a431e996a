"""SRL model: word representation -> encoder variant -> bilinear scorer -> CRF."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, ParamView, Tape, Tensor
from .corpus import AnnotatedSentence, RoleSpan, bio_to_spans, spans_to_bio
from .encoder import (
    STAGE_TYPES,
    CompiledEdges,
    Embeddings,
    Vocab,
    baseline_encode,
    compile_dependency,
    compile_span_graph,
    depgcn_encode,
    embed_tokens,
    init_gcn_stage,
    init_lstm_stack,
    spangcn_encode,
)
from .labeler import (
    CrfMasks,
    LabelSet,
    bilinear_scores,
    build_transition_mask,
    crf_from_params,
    crf_log_likelihood,
    init_scorer,
    viterbi_decode,
)
from .treebank import build_span_graph, strip_preterminals, to_dependency

VARIANTS = ("baseline", "spangcn", "depgcn")


@dataclass
class ModelConfig:
    variant: str = "spangcn"
    hidden: int = 300
    pred_dim: int = 100
    lower_layers: int = 4
    top_layers: int = 2
    baseline_layers: int = 8
    word_dropout: float = 0.1
    recurrent_dropout: float = 0.1
    softmax_before_crf: bool = False
    ln_eps: float = 1e-5
    head_rules: dict[str, str] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("hidden", "pred_dim", "lower_layers", "top_layers", "baseline_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("word_dropout", "recurrent_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")

    @property
    def syntactic(self) -> bool:
        return self.variant != "baseline"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Instance:
    """One (sentence, predicate) pair prepared for the model."""

    key: tuple[int, int]
    tokens: list[str]
    pred: int
    gold_spans: list[RoleSpan]
    gold: list[int] | None
    masks: CrfMasks
    graph: dict[str, CompiledEdges] | None = None
    dep: CompiledEdges | None = None


class SrlModel:
    def __init__(
        self,
        config: ModelConfig,
        embeddings: Embeddings,
        labels: LabelSet,
        tree_labels: Vocab,
        dep_labels: Vocab,
        params: ModelParams | None = None,
    ):
        self.config = config
        self.embeddings = embeddings
        self.labels = labels
        self.tree_labels = tree_labels
        self.dep_labels = dep_labels
        self.params = params if params is not None else ModelParams()

    # -- construction ------------------------------------------------------

    @classmethod
    def build(
        cls,
        config: ModelConfig,
        train: Sequence[AnnotatedSentence],
        embeddings: Embeddings,
        rng: np.random.Generator,
    ) -> "SrlModel":
        roles = {s.label for sent in train for p in sent.predicates for s in p.spans}
        tree_labels, dep_labels = set(), set()
        for sent in train:
            tree = sent.parsed_tree
            if tree is None:
                continue
            tree = strip_preterminals(tree)
            tree_labels.update(n.label for n in tree.nodes)
            dep_labels.update(to_dependency(tree, config.head_rules).labels)
        model = cls(config, embeddings, LabelSet.from_roles(roles), Vocab(tree_labels), Vocab(dep_labels))
        model.init_params(rng)
        return model

    def init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        p = ModelParams()
        init = ad.Initializer(rng)
        d_in = self.embeddings.dim + cfg.pred_dim
        p.add("embed.ln_gain", np.ones(self.embeddings.dim))
        p.add("embed.ln_bias", np.zeros(self.embeddings.dim))
        p.add("predemb", rng.normal(0.0, 1.0, size=(2, cfg.pred_dim)))
        if cfg.variant == "baseline":
            init_lstm_stack(p, init, "base", cfg.baseline_layers, d_in, cfg.hidden)
        else:
            init_lstm_stack(p, init, "lower", cfg.lower_layers, d_in, cfg.hidden)
            stages = ("compose", "tree", "decompose") if cfg.variant == "spangcn" else ("dep",)
            n_labels = len(self.tree_labels) if cfg.variant == "spangcn" else len(self.dep_labels)
            for stage in stages:
                init_gcn_stage(p, init, stage, STAGE_TYPES[stage], n_labels, cfg.hidden)
            init_lstm_stack(p, init, "top", cfg.top_layers, cfg.hidden, cfg.hidden)
        init_scorer(p, init, cfg.hidden, len(self.labels))
        p.frozen["embeddings"] = self.embeddings.matrix
        self.params = p

    # -- data --------------------------------------------------------------

    def instances(self, sentences: Sequence[AnnotatedSentence], first_id: int = 0) -> list[Instance]:
        """Expand sentences into per-predicate instances.

        Syntactic variants skip sentences without a tree.
        """
        out = []
        for k, sent in enumerate(sentences, first_id):
            graph = dep = None
            if self.config.syntactic:
                tree = sent.parsed_tree
                if tree is None:
                    continue
                tree = strip_preterminals(tree)
                if self.config.variant == "spangcn":
                    graph = compile_span_graph(build_span_graph(tree), self.tree_labels)
                else:
                    dep = compile_dependency(to_dependency(tree, self.config.head_rules), self.dep_labels)
            for p in sent.predicates:
                tags = spans_to_bio(p.spans, len(sent.tokens))
                gold = None
                if all(t == "O" or t in self.labels.index for t in tags):
                    gold = self.labels.encode(tags)
                masks = build_transition_mask(self.labels, p.allowed_roles)
                out.append(Instance((k, p.index), list(sent.tokens), p.index, list(p.spans), gold, masks, graph, dep))
        return out

    # -- forward -----------------------------------------------------------

    def encode(self, P: ParamView, inst: Instance, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        x = embed_tokens(P, inst.tokens, inst.pred, self.embeddings, training, rng, cfg.word_dropout, cfg.ln_eps)
        rd = cfg.recurrent_dropout
        if cfg.variant == "baseline":
            return baseline_encode(P, x, cfg.baseline_layers, training, rng, rd)
        if cfg.variant == "spangcn":
            return spangcn_encode(P, x, inst.graph, cfg.lower_layers, cfg.top_layers, training, rng, rd, cfg.ln_eps)
        return depgcn_encode(P, x, inst.dep, cfg.lower_layers, cfg.top_layers, training, rng, rd, cfg.ln_eps)

    def scores(self, P: ParamView, inst: Instance, training: bool = False, rng=None) -> Tensor:
        return bilinear_scores(P, self.encode(P, inst, training, rng), inst.pred)

    def loss(self, P: ParamView, inst: Instance, training: bool = False, rng=None) -> Tensor:
        if inst.gold is None:
            raise ValueError(f"instance {inst.key} has roles outside the label set")
        s = self.scores(P, inst, training, rng)
        return crf_log_likelihood(P, s, inst.gold, self.config.softmax_before_crf)

    def loss_and_grads(self, inst: Instance, rng: np.random.Generator | None, training: bool = True):
        tape = Tape()
        loss = self.loss(self.params.bind(tape), inst, training, rng)
        return loss.item(), tape.backward(loss, self.params)

    def predict(self, inst: Instance, params: ModelParams | None = None) -> list[str]:
        params = params if params is not None else self.params
        # a per-position log-softmax shift cannot change the argmax path
        s = self.scores(params.bind(None), inst).value
        return self.labels.decode(viterbi_decode(s, crf_from_params(params, inst.masks)))

    def predict_spans(self, inst: Instance, params: ModelParams | None = None) -> list[RoleSpan]:
        return bio_to_spans(self.predict(inst, params))

    # -- persistence -------------------------------------------------------

    def meta(self) -> dict:
        return {
            "config": asdict(self.config),
            "labels": self.labels.labels,
            "tree_labels": self.tree_labels.items[1:],
            "dep_labels": self.dep_labels.items[1:],
            "words": self.embeddings.words,
        }

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.meta()
        meta.update(extra or {})
        ad.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> tuple["SrlModel", dict]:
        params, meta = ad.load_checkpoint(path)
        emb = Embeddings(meta["words"], params.frozen["embeddings"])
        model = cls(
            ModelConfig.from_dict(meta["config"]),
            emb,
            LabelSet(meta["labels"]),
            Vocab(meta["tree_labels"]),
            Vocab(meta["dep_labels"]),
            params,
        )
        return model, meta
