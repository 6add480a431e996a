"""Training loop: per-example Adam steps, global-norm clipping, plateau halving."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import ModelParams, NonFiniteError
from .corpus import AnnotatedSentence
from .encoder import Embeddings
from .evalkit import MetricsReport, span_prf
from .model import Instance, ModelConfig, SrlModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    max_epochs: int = 100
    plateau_patience: int = 2
    lr_decay: float = 0.5
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "spangcn"
    hidden: int = 300
    embed_dim: int = 100
    pred_dim: int = 100
    lower_layers: int = 4
    top_layers: int = 2
    baseline_layers: int = 8
    word_dropout: float = 0.1
    recurrent_dropout: float = 0.1
    softmax_before_crf: bool = False
    head_rules: dict[str, str] | None = None
    record_timing: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        self.model_config()  # validates the model fields

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(asdict(self))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer pieces


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ModelParams | dict,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place Adam update with bias correction."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a strict improvement."""

    def __init__(self, lr: float, patience: int = 2, factor: float = 0.5):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = -np.inf
        self.bad_epochs = 0
        self.halvings: list[int] = []
        self.epoch = 0

    def step(self, score: float) -> float:
        self.epoch += 1
        if score > self.best:
            self.best = score
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.halvings.append(self.epoch)
                self.bad_epochs = 0
        return self.lr


# ---------------------------------------------------------------------------
# evaluation helpers


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SPANGCN_THREADS", "1")))
    except ValueError:
        return 1


def predict_all(model: SrlModel, instances: Sequence[Instance], params: ModelParams | None = None) -> dict:
    """Map instance key -> predicted spans; fans out over ``SPANGCN_THREADS`` workers."""
    params = params if params is not None else model.params
    n = _threads()
    if n == 1 or len(instances) < 2:
        preds = [model.predict_spans(i, params) for i in instances]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            preds = list(pool.map(lambda i: model.predict_spans(i, params), instances))
    return {inst.key: preds[k] for k, inst in enumerate(instances)}


def evaluate(model: SrlModel, instances: Sequence[Instance], params: ModelParams | None = None) -> MetricsReport:
    pred = predict_all(model, instances, params)
    gold = {inst.key: inst.gold_spans for inst in instances}
    return span_prf(gold, pred)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SrlModel
    best_params: ModelParams
    best_dev_f1: float
    log: list[dict]
    lr_halvings: list[int]


class TrainingAborted(RuntimeError):
    pass


def make_embeddings(config: TrainConfig, sentences: Sequence[AnnotatedSentence], path=None) -> Embeddings:
    words = {t for s in sentences for t in s.tokens}
    if path is not None:
        return Embeddings.load_text(path, restrict_to=words)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    return Embeddings.random(words, config.embed_dim, rng)


def train(
    config: TrainConfig,
    train_set: Sequence[AnnotatedSentence],
    dev_set: Sequence[AnnotatedSentence],
    embeddings: Embeddings | None = None,
    out_dir: str | Path | None = None,
    stop_when: Callable[[dict], bool] | None = None,
) -> TrainResult:
    """Train and keep the parameters with the best dev span F1.

    With ``out_dir`` set, writes ``log.jsonl`` (one record per epoch) and
    ``checkpoint.bin`` (best-dev parameters).  ``stop_when`` is called with each
    epoch record and ends training early when it returns true.
    """
    if not train_set:
        raise ValueError("training set is empty")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, dropout_rng, shuffle_rng = (np.random.default_rng(s) for s in seeds)
    if embeddings is None:
        embeddings = make_embeddings(config, list(train_set) + list(dev_set))
    model = SrlModel.build(config.model_config(), train_set, embeddings, init_rng)
    train_inst = [i for i in model.instances(train_set) if i.gold is not None]
    dev_inst = model.instances(dev_set, first_id=0)
    if not train_inst:
        raise ValueError("no usable training instances (missing trees?)")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "w", encoding="utf-8")
    else:
        log_fh = None

    schedule = PlateauSchedule(config.lr, config.plateau_patience, config.lr_decay)
    state = AdamState()
    best_params = model.params.copy()
    best_f1 = -1.0
    records: list[dict] = []
    try:
        for epoch in range(1, config.max_epochs + 1):
            started = time.perf_counter()
            lr = schedule.lr
            total = 0.0
            for k in shuffle_rng.permutation(len(train_inst)):
                inst = train_inst[k]
                try:
                    nll, grads = model.loss_and_grads(inst, dropout_rng)
                except NonFiniteError as err:
                    raise TrainingAborted(f"non-finite value on example {inst.key}: {err}") from err
                if not np.isfinite(nll):
                    raise TrainingAborted(f"non-finite loss on example {inst.key}")
                total += nll
                grads, _ = clip_global_norm(grads, config.grad_clip)
                adam_step(model.params, grads, state, lr, config.beta1, config.beta2, config.adam_eps)
            report = evaluate(model, dev_inst) if dev_inst else MetricsReport.empty()
            if report.f1 > best_f1:
                best_f1 = report.f1
                best_params = model.params.copy()
            schedule.step(report.f1)
            rec = {
                "epoch": epoch,
                "lr": lr,
                "train_nll": total / len(train_inst),
                "dev_p": report.precision,
                "dev_r": report.recall,
                "dev_f1": report.f1,
                "seconds": round(time.perf_counter() - started, 3) if config.record_timing else None,
            }
            records.append(rec)
            log.info("epoch %d lr %.6g nll %.4f dev F1 %.4f", epoch, lr, rec["train_nll"], report.f1)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if stop_when is not None and stop_when(rec):
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    result = TrainResult(model, best_params, best_f1, records, list(schedule.halvings))
    if out is not None:
        final = SrlModel(model.config, model.embeddings, model.labels, model.tree_labels, model.dep_labels, best_params)
        final.save(out / "checkpoint.bin", {"train_config": asdict(config), "best_dev_f1": best_f1})
        with open(out / "resolved_config.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(config), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result
