"""Bilinear predicate-argument scorer and a first-order linear-chain CRF."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, ParamView, Tensor

OUTSIDE = "O"


class LabelError(ValueError):
    pass


class LabelSet:
    """BIO labels with ``O`` at index 0 followed by B-/I- pairs per role."""

    def __init__(self, labels: Sequence[str]):
        labels = list(labels)
        if not labels or labels[0] != OUTSIDE:
            raise LabelError("label index 0 must be 'O'")
        if len(set(labels)) != len(labels):
            raise LabelError("duplicate labels")
        self.labels = labels
        self.index = {lab: i for i, lab in enumerate(labels)}

    @classmethod
    def from_roles(cls, roles: Iterable[str]) -> "LabelSet":
        labels = [OUTSIDE]
        for role in sorted(set(roles)):
            labels += [f"B-{role}", f"I-{role}"]
        return cls(labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> str:
        return self.labels[i]

    def encode(self, tags: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tags]
        except KeyError as err:
            raise LabelError(f"unknown label {err.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.labels[i] for i in ids]

    @property
    def roles(self) -> list[str]:
        return [lab[2:] for lab in self.labels if lab.startswith("B-")]


def _split(label: str) -> tuple[str, str | None]:
    if label == OUTSIDE:
        return OUTSIDE, None
    prefix, _, role = label.partition("-")
    if prefix not in ("B", "I") or not role:
        raise LabelError(f"malformed BIO label {label!r}")
    return prefix, role


@dataclass(frozen=True)
class CrfMasks:
    """Allowed transitions (L x L), allowed first labels, allowed labels overall."""

    transitions: np.ndarray
    start: np.ndarray
    labels: np.ndarray


@dataclass
class CrfParams:
    transitions: np.ndarray
    start: np.ndarray
    end: np.ndarray
    masks: CrfMasks | None = None


def build_transition_mask(labels: LabelSet, allowed_roles: Iterable[str] | None = None) -> CrfMasks:
    """Hard BIO constraints, optionally restricted to a frame's role set.

    I-X may only follow B-X or I-X and may not start a sequence.  With
    ``allowed_roles`` every tag of a role outside the set is forbidden; ``O``
    is always allowed.
    """
    parts = [_split(lab) for lab in labels.labels]
    begins = {role for prefix, role in parts if prefix == "B"}
    for prefix, role in parts:
        if prefix == "I" and role not in begins:
            raise LabelError(f"I-{role} has no matching B-{role}")
    L = len(labels)
    trans = np.ones((L, L), dtype=bool)
    start = np.ones(L, dtype=bool)
    for j, (pj, rj) in enumerate(parts):
        if pj != "I":
            continue
        start[j] = False
        for i, (pi, ri) in enumerate(parts):
            if pi == OUTSIDE or ri != rj:
                trans[i, j] = False
    allowed = np.ones(L, dtype=bool)
    if allowed_roles is not None:
        keep = set(allowed_roles)
        for j, (pj, rj) in enumerate(parts):
            if rj is not None and rj not in keep:
                allowed[j] = False
    return CrfMasks(trans, start, allowed)


def init_scorer(params: ModelParams, init: ad.Initializer, dim: int, n_labels: int) -> None:
    params.add("scorer.W_pred", init.xavier(dim, dim))
    params.add("scorer.b_pred", np.zeros(dim))
    params.add("scorer.W_arg", init.xavier(dim, dim))
    params.add("scorer.b_arg", np.zeros(dim))
    params.add("scorer.U", init.xavier(dim, dim, shape=(dim, n_labels, dim)))
    params.add("crf.trans", np.zeros((n_labels, n_labels)))
    params.add("crf.start", np.zeros(n_labels))
    params.add("crf.end", np.zeros(n_labels))


def bilinear_scores(P: ParamView, h: Tensor, p: int) -> Tensor:
    """s[t, l] = h_pred^T U_l h_arg_t with ReLU projections of the encoder states."""
    T, d = h.shape
    if not 0 <= p < T:
        raise LabelError(f"predicate position {p} out of range for {T} tokens")
    U = P["scorer.U"]
    n_labels = U.shape[1]
    h_pred = ad.relu(h[p : p + 1] @ P["scorer.W_pred"] + P["scorer.b_pred"])
    h_arg = ad.relu(h @ P["scorer.W_arg"] + P["scorer.b_arg"])
    per_label = ad.reshape(h_pred @ ad.reshape(U, (d, n_labels * d)), (n_labels, d))
    return h_arg @ per_label.T


def crf_log_partition(scores: Tensor, trans: Tensor, start: Tensor, end: Tensor) -> Tensor:
    """Forward algorithm in log space."""
    T, L = scores.shape
    if T == 0:
        raise LabelError("cannot score an empty sequence")
    alpha = scores[0] + start
    for t in range(1, T):
        alpha = ad.logsumexp(ad.reshape(alpha, (L, 1)) + trans, axis=0) + scores[t]
    return ad.logsumexp(alpha + end)


def crf_path_score(scores: Tensor, trans: Tensor, start: Tensor, end: Tensor, tags: Sequence[int]) -> Tensor:
    T, L = scores.shape
    tags = np.asarray(tags, dtype=np.intp)
    if len(tags) != T:
        raise LabelError(f"{len(tags)} tags for {T} positions")
    total = ad.tsum(ad.take(scores, np.arange(T) * L + tags))
    if T > 1:
        total = total + ad.tsum(ad.take(trans, tags[:-1] * L + tags[1:]))
    return total + ad.take(start, tags[:1]) + ad.take(end, tags[-1:])


def crf_log_likelihood(P: ParamView, scores: Tensor, gold: Sequence[int], softmax_first: bool = False) -> Tensor:
    """Negative log-likelihood of ``gold``; transitions are unconstrained here."""
    if scores.shape[0] == 0:
        raise LabelError("cannot score an empty sequence")
    if softmax_first:
        scores = ad.log_softmax(scores, axis=1)
    trans, start, end = P["crf.trans"], P["crf.start"], P["crf.end"]
    log_z = crf_log_partition(scores, trans, start, end)
    return ad.reshape(log_z - crf_path_score(scores, trans, start, end, gold), ())


def viterbi_decode(scores: np.ndarray, crf: CrfParams) -> list[int]:
    """Best label sequence under the hard masks; ties go to the lower label index."""
    scores = np.asarray(scores, dtype=np.float64)
    T, L = scores.shape
    if T == 0:
        return []
    trans = crf.transitions.copy()
    start = crf.start.copy()
    emit = scores.copy()
    if crf.masks is not None:
        trans[~crf.masks.transitions] = -np.inf
        start[~crf.masks.start] = -np.inf
        emit[:, ~crf.masks.labels] = -np.inf
    delta = start + emit[0]
    back = np.zeros((T, L), dtype=np.intp)
    for t in range(1, T):
        cand = delta[:, None] + trans
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(L)] + emit[t]
    final = delta + crf.end
    best = int(np.argmax(final))
    if not np.isfinite(final[best]):
        raise LabelError("every label sequence is masked")
    path = [best]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1]


def sequence_score(scores: np.ndarray, crf: CrfParams, tags: Sequence[int]) -> float:
    """Unmasked path score in plain numpy (used by decode checks)."""
    T = len(tags)
    s = crf.start[tags[0]] + crf.end[tags[-1]] + sum(scores[t, tags[t]] for t in range(T))
    s += sum(crf.transitions[tags[t - 1], tags[t]] for t in range(1, T))
    return float(s)


def crf_from_params(params: ModelParams, masks: CrfMasks | None = None) -> CrfParams:
    return CrfParams(params["crf.trans"], params["crf.start"], params["crf.end"], masks)
