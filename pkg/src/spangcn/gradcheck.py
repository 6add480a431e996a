"""Finite-difference check of the full model on a fixed toy sentence."""

from __future__ import annotations

import numpy as np

from .autodiff import GradCheckResult, ModelParams, finite_diff_check
from .corpus import AnnotatedSentence, Predicate, RoleSpan
from .encoder import Embeddings
from .model import ModelConfig, SrlModel

# 4 tokens, 3 constituents after stripping: S[0,4) NP[0,2) VP[2,4)
FIXTURE_TREE = "(S (NP (DT the) (NN cat)) (VP (VBD sat) (RB down)))"


def fixture_sentence() -> AnnotatedSentence:
    return AnnotatedSentence(
        ["the", "cat", "sat", "down"],
        [Predicate(2, [RoleSpan(0, 2, "A0"), RoleSpan(3, 4, "AM-DIR")])],
        FIXTURE_TREE,
    )


def fixture_model(variant: str, seed: int = 0, hidden: int = 5, embed_dim: int = 4, pred_dim: int = 3,
                  lower_layers: int = 2, top_layers: int = 2, baseline_layers: int = 8) -> SrlModel:
    """Small model with every parameter drawn away from zero.

    Randomized layer-norm biases keep ReLU inputs off the kink at zero, where
    central differences are not meaningful.
    """
    rng = np.random.default_rng(seed)
    sent = fixture_sentence()
    emb = Embeddings.random(sent.tokens, embed_dim, rng)
    config = ModelConfig(
        variant=variant, hidden=hidden, pred_dim=pred_dim, lower_layers=lower_layers,
        top_layers=top_layers, baseline_layers=baseline_layers, word_dropout=0.0, recurrent_dropout=0.0,
    )
    model = SrlModel.build(config, [sent], emb, rng)
    for name, value in model.params.items():
        value += rng.normal(0.0, 0.3, size=value.shape)
    return model


def run_gradcheck(variant: str, eps: float = 1e-5, sample: int = 200, seed: int = 0, **sizes) -> GradCheckResult:
    model = fixture_model(variant, seed, **sizes)
    (inst,) = model.instances([fixture_sentence()])

    def objective(params: ModelParams, tape):
        return model.loss(params.bind(tape), inst, training=False)

    return finite_diff_check(objective, model.params, eps=eps, sample=sample, rng=np.random.default_rng(seed + 1))
