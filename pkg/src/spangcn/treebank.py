"""Bracketed constituency trees and the typed graphs compiled from them.

Trees are read from Penn-Treebank style bracketed strings.  After
part-of-speech pre-terminals are stripped, a tree is compiled into a
:class:`SpanGraph` holding the three message-passing stages used by the
span encoder (word->constituent composition, constituent<->constituent tree
messages, constituent->word decomposition).  A small head-rule table turns
a constituency tree into a dependency tree for the dependency-GCN baseline.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

__all__ = [
    "TreeError",
    "PtbParseError",
    "Node",
    "ConstituencyTree",
    "DependencyTree",
    "Edge",
    "SpanGraph",
    "COMPOSE_TYPES",
    "TREE_TYPES",
    "DECOMPOSE_TYPES",
    "DEP_TYPES",
    "UNK_LABEL",
    "ROOT_LABEL",
    "DEFAULT_RIGHT_HEADED",
    "parse_ptb",
    "render_ptb",
    "strip_preterminals",
    "build_span_graph",
    "default_head_rules",
    "to_dependency",
    "read_tree_file",
]

UNK_LABEL = "<unk>"
ROOT_LABEL = "root"

# Coarse edge types per stage; the index in each tuple selects the weight matrix.
COMPOSE_TYPES = ("start", "end")
TREE_TYPES = ("parent->child", "child->parent", "self")
DECOMPOSE_TYPES = ("start", "end")
DEP_TYPES = ("head->dep", "dep->head", "self")

DEFAULT_RIGHT_HEADED = frozenset({"VP", "PP", "SBAR"})

# Empty elements and traces are rejected rather than silently dropped.
_EMPTY_LABELS = frozenset({"-NONE-"})


class TreeError(ValueError):
    """A tree violates a structural invariant."""


class PtbParseError(TreeError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Node:
    label: str
    start: int
    end: int
    children: tuple[int, ...] = ()

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class ConstituencyTree:
    """Constituents over a token sequence.

    ``children`` of a node are node indices in left-to-right order; tokens of
    the node's span not covered by any child node are direct terminal
    children.  ``stripped`` records that pre-terminals have been removed so
    that stripping stays idempotent.
    """

    tokens: tuple[str, ...]
    nodes: tuple[Node, ...]
    root: int
    stripped: bool = False

    def __post_init__(self) -> None:
        _validate(self)

    def __len__(self) -> int:
        return len(self.tokens)

    def slots(self, index: int) -> Iterator[tuple[str, int]]:
        """Yield ``("node", i)`` / ``("token", t)`` children of a node, in order."""
        node = self.nodes[index]
        pos = node.start
        for c in node.children:
            child = self.nodes[c]
            while pos < child.start:
                yield ("token", pos)
                pos += 1
            yield ("node", c)
            pos = child.end
        while pos < node.end:
            yield ("token", pos)
            pos += 1

    def postorder(self) -> list[int]:
        order: list[int] = []
        stack = [(self.root, False)]
        while stack:
            i, done = stack.pop()
            if done:
                order.append(i)
                continue
            stack.append((i, True))
            for c in reversed(self.nodes[i].children):
                stack.append((c, False))
        return order

    def spans(self) -> list[tuple[str, int, int]]:
        return [(n.label, n.start, n.end) for n in self.nodes]


def _validate(tree: ConstituencyTree) -> None:
    n = len(tree.tokens)
    if n == 0:
        raise TreeError("tree has no tokens")
    if not 0 <= tree.root < len(tree.nodes):
        raise TreeError(f"root index {tree.root} out of range")
    root = tree.nodes[tree.root]
    if (root.start, root.end) != (0, n):
        raise TreeError(f"root spans [{root.start},{root.end}) but sentence has {n} tokens")
    seen = [False] * len(tree.nodes)
    stack = [tree.root]
    while stack:
        i = stack.pop()
        if seen[i]:
            raise TreeError(f"node {i} reached twice")
        seen[i] = True
        node = tree.nodes[i]
        if not 0 <= node.start < node.end <= n:
            raise TreeError(f"node {i} ({node.label}) has invalid span [{node.start},{node.end})")
        pos = node.start
        for c in node.children:
            if not 0 <= c < len(tree.nodes):
                raise TreeError(f"node {i} has dangling child {c}")
            child = tree.nodes[c]
            if child.start < pos or child.end > node.end:
                raise TreeError(
                    f"children of node {i} ({node.label}) overlap or leave its span"
                )
            pos = child.end
            stack.append(c)
    if not all(seen):
        raise TreeError("tree has unreachable nodes")


_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")


def parse_ptb(text: str) -> ConstituencyTree:
    """Parse one bracketed tree, e.g. ``(S (NP (DT the) (NN cat)) (VP (VBD sat)))``.

    An unlabeled outer wrapper ``( (S ...) )`` is dropped.  Terminals may also
    appear directly under a phrase, as in ``(NP the cat)``.
    """
    tokens: list[str] = []
    # Each stack frame: [label, start token, child node ids, byte offset of "("]
    stack: list[list] = []
    nodes: list[Node] = []
    result: int | None = None
    expect_label = False

    def offset(pos: int) -> int:
        return len(text[:pos].encode("utf-8"))

    for m in _TOKEN_RE.finditer(text):
        tok = m.group()
        if result is not None:
            raise PtbParseError("trailing material after tree", offset(m.start()))
        if tok == "(":
            if expect_label:
                stack[-1][0] = ""
            stack.append([None, len(tokens), [], offset(m.start())])
            expect_label = True
        elif tok == ")":
            if not stack:
                raise PtbParseError("unbalanced closing bracket", offset(m.start()))
            if expect_label:
                raise PtbParseError("empty constituent", offset(m.start()))
            label, start, kids, open_at = stack.pop()
            if len(tokens) == start:
                raise PtbParseError("empty constituent", open_at)
            if label in _EMPTY_LABELS:
                raise PtbParseError("empty elements/traces are not supported", open_at)
            if label == "" and not stack:
                # unlabeled wrapper: keep its single child as the root
                if len(kids) != 1 or nodes[kids[0]].span != (start, len(tokens)):
                    raise PtbParseError("unlabeled root must wrap exactly one tree", open_at)
                result = kids[0]
                continue
            if label == "":
                raise PtbParseError("unlabeled constituent", open_at)
            nodes.append(Node(label, start, len(tokens), tuple(kids)))
            idx = len(nodes) - 1
            if stack:
                stack[-1][2].append(idx)
            else:
                result = idx
        else:
            if not stack:
                raise PtbParseError("terminal outside of brackets", offset(m.start()))
            if expect_label:
                stack[-1][0] = tok
                expect_label = False
            else:
                tokens.append(tok)
    if stack:
        raise PtbParseError("unclosed bracket", stack[-1][3])
    if result is None:
        raise PtbParseError("no tree found", 0)
    try:
        return ConstituencyTree(tuple(tokens), tuple(nodes), result)
    except TreeError as err:
        raise PtbParseError(str(err), 0) from err


def render_ptb(tree: ConstituencyTree) -> str:
    def render(i: int) -> str:
        node = tree.nodes[i]
        parts = [
            render(j) if kind == "node" else tree.tokens[j] for kind, j in tree.slots(i)
        ]
        return f"({node.label} {' '.join(parts)})"

    return render(tree.root)


def strip_preterminals(tree: ConstituencyTree) -> ConstituencyTree:
    """Remove nodes whose only child is a single terminal token.

    Applied once to the original tree: ``(NP (NP (NN dog)))`` keeps both NPs.
    """
    if tree.stripped:
        return tree
    keep = [
        not (not n.children and n.end - n.start == 1) for n in tree.nodes
    ]
    if not keep[tree.root]:
        # single-token sentence whose root is itself a pre-terminal
        keep[tree.root] = True
    remap: dict[int, int] = {}
    new_nodes: list[Node] = []
    for i in tree.postorder():
        if not keep[i]:
            continue
        n = tree.nodes[i]
        kids = tuple(remap[c] for c in n.children if keep[c])
        new_nodes.append(Node(n.label, n.start, n.end, kids))
        remap[i] = len(new_nodes) - 1
    return ConstituencyTree(tree.tokens, tuple(new_nodes), remap[tree.root], stripped=True)


@dataclass(frozen=True, order=True)
class Edge:
    """A typed message edge.  Node refs are ``("w", i)`` or ``("c", j)``."""

    stage: str
    target: tuple[str, int]
    source: tuple[str, int]
    coarse: str
    label: str

    @property
    def fine(self) -> tuple[str, str]:
        return (self.coarse, self.label)


@dataclass(frozen=True)
class SpanGraph:
    word_count: int
    constituent_count: int
    labels: tuple[str, ...]
    edges: tuple[Edge, ...]
    spans: tuple[tuple[int, int], ...] = field(default=())

    def stage(self, name: str) -> list[Edge]:
        return [e for e in self.edges if e.stage == name]


def build_span_graph(tree: ConstituencyTree) -> SpanGraph:
    """Compile a stripped tree into compose / tree / decompose edges.

    Constituents are numbered in post-order (children before parents), so the
    numbering depends only on the tree structure.
    """
    tree = strip_preterminals(tree)
    order = tree.postorder()
    cid = {node: k for k, node in enumerate(order)}
    labels = tuple(tree.nodes[i].label for i in order)
    spans = tuple(tree.nodes[i].span for i in order)
    edges: list[Edge] = []
    for i in order:
        c = ("c", cid[i])
        node = tree.nodes[i]
        first, last = ("w", node.start), ("w", node.end - 1)
        edges.append(Edge("compose", c, first, "start", node.label))
        edges.append(Edge("compose", c, last, "end", node.label))
        edges.append(Edge("decompose", first, c, "start", node.label))
        edges.append(Edge("decompose", last, c, "end", node.label))
        edges.append(Edge("tree", c, c, "self", node.label))
        for j in node.children:
            child = ("c", cid[j])
            # fine type carries the sender's label
            edges.append(Edge("tree", child, c, "parent->child", node.label))
            edges.append(Edge("tree", c, child, "child->parent", tree.nodes[j].label))
    return SpanGraph(len(tree.tokens), len(order), labels, tuple(sorted(edges)), spans)


@dataclass(frozen=True)
class DependencyTree:
    heads: tuple[int, ...]  # -1 marks the root
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        n = len(self.heads)
        if len(self.labels) != n:
            raise TreeError("heads and labels differ in length")
        roots = [i for i, h in enumerate(self.heads) if h == -1]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one root, found {len(roots)}")
        for i in range(n):
            seen = set()
            j = i
            while j != -1:
                if j in seen:
                    raise TreeError(f"cycle through token {i}")
                if not -1 <= self.heads[j] < n or self.heads[j] == j:
                    raise TreeError(f"token {j} has invalid head {self.heads[j]}")
                seen.add(j)
                j = self.heads[j]

    def __len__(self) -> int:
        return len(self.heads)

    @property
    def root(self) -> int:
        return self.heads.index(-1)


def default_head_rules(labels: Sequence[str] = ()) -> dict[str, str]:
    rules = {label: "left" for label in labels}
    rules.update({label: "right" for label in DEFAULT_RIGHT_HEADED})
    return rules


def to_dependency(
    tree: ConstituencyTree, head_rules: Mapping[str, str] | None = None
) -> DependencyTree:
    """Head-percolation conversion.

    Each constituent picks its leftmost or rightmost child slot as the head
    (``head_rules[label]`` in ``{"left", "right"}``; labels missing from the
    table use the built-in default).  A token's label is that of the highest
    constituent it heads; tokens heading nothing take the label of the
    constituent they attach inside.
    """
    tree = strip_preterminals(tree)
    rules = default_head_rules()
    if head_rules:
        rules.update(head_rules)
    n = len(tree.tokens)
    heads = [-2] * n
    labels = [""] * n

    def head_of(i: int) -> int:
        node = tree.nodes[i]
        slots = list(tree.slots(i))
        slot_heads = [head_of(j) if kind == "node" else j for kind, j in slots]
        pick = -1 if rules.get(node.label, "left") == "right" else 0
        h = slot_heads[pick]
        for s in slot_heads:
            if s != h:
                heads[s] = h
                if not labels[s]:
                    labels[s] = node.label
        labels[h] = node.label  # overwritten by higher constituents on the way up
        return h

    root = head_of(tree.root)
    heads[root] = -1
    labels[root] = ROOT_LABEL
    return DependencyTree(tuple(heads), tuple(labels))


def read_tree_file(path) -> list[ConstituencyTree | None]:
    """One bracketed tree per line; a ``-`` line means no tree is available."""
    trees: list[ConstituencyTree | None] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line == "-":
                trees.append(None)
                continue
            try:
                trees.append(parse_ptb(line))
            except PtbParseError as err:
                raise PtbParseError(f"line {lineno}: {err}", err.offset) from err
    return trees
