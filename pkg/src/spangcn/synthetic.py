"""Synthetic SRL corpus whose roles are a function of constituent structure.

Sentences come from a small grammar ``S -> NP VP``, ``VP -> V (NP) PP*``,
``NP -> NP PP``.  Each trailing prepositional phrase attaches either to the
VP or to the noun phrase on the right frontier, chosen by coin flip, so the
token string does not determine the bracketing.  Roles are read off the
tree: the subject NP (left sibling of the predicate's VP) is A0, an NP
child of the VP is A1, and each PP child of the VP is AM-LOC.  A tagger
that cannot see the tree is left guessing at every attachment.
"""

from __future__ import annotations

import numpy as np

from .corpus import AnnotatedSentence, Predicate, RoleSpan
from .treebank import ConstituencyTree, parse_ptb, strip_preterminals

DETERMINERS = ["the", "a", "this", "that", "every", "some"]
NOUNS = ["cat", "dog", "bird", "house", "river", "garden", "table", "letter", "city", "boat", "horse", "tree"]
ADJECTIVES = ["old", "red", "small", "quiet", "green", "tall", "happy", "cold"]
NAMES = ["john", "mary", "paris", "alice", "bob", "london", "emma", "otto"]
VERBS = ["saw", "found", "painted", "moved", "watched", "left", "carried", "liked", "kept", "sold"]
INTRANSITIVE = ["slept", "waited", "stood", "arrived"]
PREPOSITIONS = ["in", "on", "with", "near", "under", "from", "behind", "beside"]

ROLES = ("A0", "A1", "AM-LOC")


def _pick(rng: np.random.Generator, words: list[str]) -> str:
    return words[int(rng.integers(len(words)))]


def _base_np(rng: np.random.Generator) -> list:
    r = rng.random()
    if r < 0.2:
        return ["NP", [("NNP", _pick(rng, NAMES))]]
    if r < 0.6:
        return ["NP", [("DT", _pick(rng, DETERMINERS)), ("NN", _pick(rng, NOUNS))]]
    return ["NP", [("DT", _pick(rng, DETERMINERS)), ("JJ", _pick(rng, ADJECTIVES)), ("NN", _pick(rng, NOUNS))]]


def _pp(rng: np.random.Generator) -> tuple[list, list]:
    obj = _base_np(rng)
    return ["PP", [("IN", _pick(rng, PREPOSITIONS)), obj]], obj


def _attach_to_np(np_node: list, pp: list) -> None:
    # NP -> NP PP, reusing the node object so outer references stay valid
    inner = ["NP", np_node[1]]
    np_node[1] = [inner, pp]


def _sentence_tree(rng: np.random.Generator, depth: int) -> list:
    subj = _base_np(rng)
    if depth > 0 and rng.random() < 0.25:
        pp, _ = _pp(rng)
        _attach_to_np(subj, pp)
    transitive = rng.random() < 0.85
    vp = ["VP", [("VBD", _pick(rng, VERBS if transitive else INTRANSITIVE))]]
    frontier = None
    if transitive:
        obj = _base_np(rng)
        vp[1].append(obj)
        frontier = obj
    n_pp = int(rng.integers(0, depth + 1))
    for _ in range(n_pp):
        pp, pp_obj = _pp(rng)
        if frontier is not None and rng.random() < 0.5:
            _attach_to_np(frontier, pp)
        else:
            vp[1].append(pp)
        frontier = pp_obj
    return ["S", [subj, vp]]


def _render(node) -> str:
    if isinstance(node, tuple):
        return f"({node[0]} {node[1]})"
    return f"({node[0]} {' '.join(_render(c) for c in node[1])})"


def roles_from_tree(tree: ConstituencyTree) -> tuple[int, list[RoleSpan]]:
    """Predicate index and role spans read off a generated tree."""
    tree = strip_preterminals(tree)
    root = tree.nodes[tree.root]
    subj_i, vp_i = root.children
    vp = tree.nodes[vp_i]
    pred = vp.start
    spans = [RoleSpan(tree.nodes[subj_i].start, tree.nodes[subj_i].end, "A0")]
    for c in vp.children:
        node = tree.nodes[c]
        label = "A1" if node.label == "NP" else "AM-LOC"
        spans.append(RoleSpan(node.start, node.end, label))
    return pred, spans


def gen_synthetic(seed: int, size: int, grammar_depth: int = 2) -> list[AnnotatedSentence]:
    """``size`` sentences with one predicate each and their gold trees."""
    if size < 1:
        raise ValueError("size must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(size):
        text = _render(_sentence_tree(rng, grammar_depth))
        tree = parse_ptb(text)
        pred, spans = roles_from_tree(tree)
        out.append(AnnotatedSentence(list(tree.tokens), [Predicate(pred, spans)], text))
    return out
