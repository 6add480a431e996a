"""Annotated sentences, BIO <-> span conversion and JSONL I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

from .treebank import ConstituencyTree, PtbParseError, parse_ptb, render_ptb

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


class RoleSpan(NamedTuple):
    start: int
    end: int
    label: str


@dataclass
class Predicate:
    index: int
    spans: list[RoleSpan] = field(default_factory=list)
    frame: str | None = None
    allowed_roles: list[str] | None = None


@dataclass
class AnnotatedSentence:
    tokens: list[str]
    predicates: list[Predicate]
    tree: str | None = None

    def __post_init__(self) -> None:
        validate_sentence(self)

    @cached_property
    def parsed_tree(self) -> ConstituencyTree | None:
        if self.tree is None:
            return None
        return parse_ptb(self.tree)

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "predicates": [
                {
                    "index": p.index,
                    "frame": p.frame,
                    "allowed_roles": p.allowed_roles,
                    "spans": [[s.start, s.end, s.label] for s in p.spans],
                }
                for p in self.predicates
            ],
            "tree": self.tree,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotatedSentence":
        if not isinstance(obj, dict):
            raise CorpusError("expected a JSON object")
        unknown = set(obj) - {"tokens", "predicates", "tree"}
        if unknown:
            raise CorpusError(f"unknown fields {sorted(unknown)}")
        tokens = obj.get("tokens")
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise CorpusError("'tokens' must be a list of strings")
        preds = []
        for p in obj.get("predicates") or []:
            try:
                spans = [RoleSpan(int(s), int(e), str(lab)) for s, e, lab in p.get("spans", [])]
                roles = p.get("allowed_roles")
                preds.append(
                    Predicate(
                        int(p["index"]),
                        spans,
                        p.get("frame"),
                        None if roles is None else [str(r) for r in roles],
                    )
                )
            except (KeyError, TypeError, ValueError) as err:
                raise CorpusError(f"malformed predicate entry: {err}") from None
        tree = obj.get("tree")
        if tree is not None and not isinstance(tree, str):
            raise CorpusError("'tree' must be a string or null")
        return cls(tokens, preds, tree)


def validate_sentence(sent: AnnotatedSentence) -> None:
    n = len(sent.tokens)
    if n == 0:
        raise CorpusError("sentence has no tokens")
    seen = set()
    for p in sent.predicates:
        if not 0 <= p.index < n:
            raise CorpusError(f"predicate index {p.index} out of range for {n} tokens")
        if p.index in seen:
            raise CorpusError(f"duplicate predicate index {p.index}")
        seen.add(p.index)
        for s in p.spans:
            if not 0 <= s.start < s.end <= n:
                raise CorpusError(f"span {list(s)} out of bounds for {n} tokens")
        ordered = sorted(p.spans)
        for a, b in zip(ordered, ordered[1:]):
            if b.start < a.end:
                raise CorpusError(f"overlapping spans {list(a)} and {list(b)}")


def spans_to_bio(spans: Iterable[RoleSpan], length: int) -> list[str]:
    tags = ["O"] * length
    for s in sorted(spans):
        start, end, label = s
        if not 0 <= start < end <= length:
            raise CorpusError(f"span {list(s)} out of bounds for {length} tokens")
        if any(t != "O" for t in tags[start:end]):
            raise CorpusError(f"span {list(s)} overlaps another span")
        tags[start] = f"B-{label}"
        for t in range(start + 1, end):
            tags[t] = f"I-{label}"
    return tags


def bio_to_spans(tags: Sequence[str]) -> list[RoleSpan]:
    """Read spans off a BIO sequence.

    Lenient: an I-X that does not continue an X span opens a new span.
    """
    spans: list[RoleSpan] = []
    start, label = None, None
    for i, tag in enumerate(tags):
        prefix, _, role = tag.partition("-")
        if tag == "O" or prefix not in ("B", "I"):
            if label is not None:
                spans.append(RoleSpan(start, i, label))
            start, label = None, None
        elif prefix == "B" or role != label:
            if label is not None:
                spans.append(RoleSpan(start, i, label))
            start, label = i, role
    if label is not None:
        spans.append(RoleSpan(start, len(tags), label))
    return spans


def is_valid_bio(tags: Sequence[str]) -> bool:
    prev = None
    for tag in tags:
        if tag == "O":
            prev = None
            continue
        prefix, _, role = tag.partition("-")
        if prefix not in ("B", "I") or not role:
            return False
        if prefix == "I" and prev != role:
            return False
        prev = role
    return True


def read_jsonl(
    lines: Iterable[str],
    require_tree: bool = False,
    skip_bad: bool = False,
) -> Iterator[AnnotatedSentence]:
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"invalid JSON: {err.msg}") from None
            sent = AnnotatedSentence.from_json(obj)
            if sent.tree is None and require_tree:
                raise CorpusError("tree required by the selected model")
            if sent.tree is not None:
                tree = sent.parsed_tree
                if list(tree.tokens) != list(sent.tokens):
                    raise CorpusError("tree terminals do not match tokens")
        except (CorpusError, PtbParseError) as err:
            if skip_bad:
                log.warning("skipping line %d: %s", lineno, err)
                continue
            msg = err.args[0] if isinstance(err, CorpusError) and err.lineno is None else str(err)
            raise CorpusError(msg, lineno) from None
        yield sent


def load_jsonl(path, require_tree: bool = False, skip_bad: bool = False) -> list[AnnotatedSentence]:
    with open(path, encoding="utf-8") as fh:
        try:
            return list(read_jsonl(fh, require_tree, skip_bad))
        except CorpusError as err:
            raise CorpusError(f"{path}: {err}") from None


def dump_jsonl(sentences: Iterable[AnnotatedSentence], out: str | Path | IO[str]) -> None:
    def write(fh):
        for s in sentences:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")

    if hasattr(out, "write"):
        write(out)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            write(fh)


def with_tree(sent: AnnotatedSentence, tree: ConstituencyTree | None) -> AnnotatedSentence:
    return AnnotatedSentence(list(sent.tokens), sent.predicates, None if tree is None else render_ptb(tree))
