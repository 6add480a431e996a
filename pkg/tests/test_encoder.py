import numpy as np
import pytest

from spangcn import autodiff as ad
from spangcn.autodiff import Initializer, ModelParams, Tensor
from spangcn.encoder import (
    STAGE_TYPES,
    CompiledEdges,
    EncoderError,
    Embeddings,
    Vocab,
    bilstm_encode,
    compile_dependency,
    compile_span_graph,
    depgcn_encode,
    embed_tokens,
    gated_gcn_layer,
    init_gcn_stage,
    init_lstm_stack,
    spangcn_encode,
)
from spangcn.treebank import TREE_TYPES, build_span_graph, parse_ptb, strip_preterminals, to_dependency

TREE = strip_preterminals(parse_ptb("(S (NP (DT the) (NN cat)) (VP (VBD sat) (RB down)))"))


def embed_params(dim, pred_dim, rng):
    p = ModelParams()
    p.add("embed.ln_gain", np.ones(dim))
    p.add("embed.ln_bias", np.zeros(dim))
    p.add("predemb", rng.normal(size=(2, pred_dim)))
    return p


def test_embed_tokens_shape_and_predicate_rows():
    rng = np.random.default_rng(0)
    emb = Embeddings.random(["a", "b", "c"], 100, rng)
    p = embed_params(100, 100, rng)
    x = embed_tokens(p.bind(None), ["a", "b", "c"], 1, emb).value
    assert x.shape == (3, 200)
    assert np.array_equal(x[1, 100:], p["predemb"][1])
    assert np.array_equal(x[0, 100:], p["predemb"][0])
    assert np.array_equal(x[2, 100:], p["predemb"][0])


def test_embed_tokens_layer_norm_part():
    rng = np.random.default_rng(1)
    emb = Embeddings.random(["a"], 50, rng)
    x = embed_tokens(embed_params(50, 4, rng).bind(None), ["a", "a"], 0, emb).value[:, :50]
    assert np.allclose(x.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(x.var(axis=1), 1.0, atol=1e-3)


def test_embed_tokens_unknown_word_uses_unk_row():
    rng = np.random.default_rng(2)
    emb = Embeddings.random(["a"], 8, rng)
    assert emb.lookup(["zzz", "a"]).tolist() == [0, 1]
    p = embed_params(8, 2, rng)
    x = embed_tokens(p.bind(None), ["zzz"], 0, emb).value
    expected = ad.layer_norm(Tensor(emb.matrix[0]), Tensor(np.ones(8)), Tensor(np.zeros(8))).value
    assert np.allclose(x[0, :8], expected)


def test_embed_tokens_rejects_bad_predicate():
    rng = np.random.default_rng(0)
    emb = Embeddings.random(["a"], 4, rng)
    with pytest.raises(EncoderError):
        embed_tokens(embed_params(4, 2, rng).bind(None), ["a"], 1, emb)


def test_embeddings_load_text(tmp_path):
    path = tmp_path / "vec.txt"
    path.write_text("cat 1 2\ndog 3 4\nemu 5 6\n", encoding="utf-8")
    emb = Embeddings.load_text(path, restrict_to={"cat", "emu"})
    assert emb.words == ["cat", "emu"]
    assert np.array_equal(emb.matrix, [[0, 0], [1, 2], [5, 6]])
    path.write_text("cat 1 2\ndog 3\n", encoding="utf-8")
    with pytest.raises(EncoderError):
        Embeddings.load_text(path)


def test_vocab_unknown_fallback():
    v = Vocab(["NP", "VP", "NP"])
    assert len(v) == 3
    assert v["NP"] != 0 and v["XP"] == 0


def lstm_params(layers, d_in, hidden, seed=0):
    p = ModelParams()
    init_lstm_stack(p, Initializer(np.random.default_rng(seed)), "enc", layers, d_in, hidden)
    return p


def test_bilstm_shape():
    p = lstm_params(4, 12, 300)
    x = Tensor(np.random.default_rng(0).normal(size=(5, 12)))
    assert bilstm_encode(p.bind(None), "enc", x, 4).shape == (5, 300)


def test_bilstm_empty_sequence():
    p = lstm_params(2, 3, 4)
    assert bilstm_encode(p.bind(None), "enc", Tensor(np.zeros((0, 3))), 2).shape == (0, 4)


def test_bilstm_dropout_is_seeded():
    p = lstm_params(2, 3, 6)
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    runs = [
        bilstm_encode(p.bind(None), "enc", x, 2, True, np.random.default_rng(9), 0.5).value for _ in range(2)
    ]
    assert np.array_equal(runs[0], runs[1])
    plain = bilstm_encode(p.bind(None), "enc", x, 2).value
    assert not np.array_equal(runs[0], plain)


def test_bilstm_alternates_direction():
    # the first layer runs left to right, so its output at t=0 ignores later tokens
    p = lstm_params(1, 2, 3)
    x = np.random.default_rng(0).normal(size=(4, 2))
    y = x.copy()
    y[3] += 1.0
    a = bilstm_encode(p.bind(None), "enc", Tensor(x), 1).value
    b = bilstm_encode(p.bind(None), "enc", Tensor(y), 1).value
    assert np.array_equal(a[0], b[0])
    p2 = lstm_params(2, 2, 3)
    a = bilstm_encode(p2.bind(None), "enc", Tensor(x), 2).value
    b = bilstm_encode(p2.bind(None), "enc", Tensor(y), 2).value
    assert not np.allclose(a[0], b[0])


def gcn_params(coarse, n_labels, dim, seed=0):
    p = ModelParams()
    init_gcn_stage(p, Initializer(np.random.default_rng(seed)), "g", coarse, n_labels, dim)
    return p


def test_gcn_zero_parameters():
    p = gcn_params(TREE_TYPES, 2, 4)
    for name, value in p.items():
        value[...] = 0.0
    p["g.ln_gain"][...] = 1.0
    p["g.ln_bias"][...] = [0.5, -0.5, 1.0, 0.0]
    states = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    edges = CompiledEdges.build([0, 1, 2], [1, 2, 0], [0, 1, 2], [0, 2, 4], 3, 3)
    out = gated_gcn_layer(p.bind(None), "g", TREE_TYPES, states, edges).value
    assert np.allclose(out, np.tile([0.5, 0.0, 1.0, 0.0], (3, 1)))


def test_gcn_single_edge_hand_value():
    p = gcn_params(("only",), 1, 3)
    p["g.U[only]"][...] = np.eye(3)
    p["g.ugate[only]"][...] = 0.0
    p["g.bgate"][...] = 50.0  # sigmoid(50) == 1 in float64
    states = Tensor(np.array([[2.0, 4.0, 6.0]]))
    edges = CompiledEdges.build([0], [0], [0], [0], 1, 1)
    out = gated_gcn_layer(p.bind(None), "g", ("only",), states, edges).value
    assert np.allclose(out, [[0.0, 0.0, 1.2247]], atol=1e-4)


def test_gcn_duplicate_edges_double_the_sum(monkeypatch):
    seen = []
    real = ad.layer_norm

    def spy(x, gain, bias, eps=1e-5):
        seen.append(x.value.copy())
        return real(x, gain, bias, eps)

    monkeypatch.setattr(ad, "layer_norm", spy)
    p = gcn_params(("only",), 1, 3, seed=4)
    states = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    gated_gcn_layer(p.bind(None), "g", ("only",), states, CompiledEdges.build([0], [1], [0], [0], 2, 2))
    gated_gcn_layer(p.bind(None), "g", ("only",), states, CompiledEdges.build([0, 0], [1, 1], [0, 0], [0, 0], 2, 2))
    assert np.allclose(seen[1], 2 * seen[0])


def test_gcn_edge_permutation_invariance():
    rng = np.random.default_rng(5)
    p = gcn_params(TREE_TYPES, 3, 6, seed=1)
    for value in p._values.values():
        value += rng.normal(0, 0.3, size=value.shape)
    n, m = 5, 20
    src, dst = rng.integers(n, size=m), rng.integers(n, size=m)
    coarse = rng.integers(3, size=m)
    fine = coarse * 3 + rng.integers(3, size=m)
    states = Tensor(rng.normal(size=(n, 6)))
    base = gated_gcn_layer(p.bind(None), "g", TREE_TYPES, states, CompiledEdges.build(src, dst, coarse, fine, n, n)).value
    for _ in range(5):
        perm = rng.permutation(m)
        edges = CompiledEdges.build(src[perm], dst[perm], coarse[perm], fine[perm], n, n)
        out = gated_gcn_layer(p.bind(None), "g", TREE_TYPES, states, edges).value
        assert np.max(np.abs(out - base)) <= 1e-12


def test_gcn_sender_count_checked():
    p = gcn_params(("only",), 1, 3)
    with pytest.raises(EncoderError):
        gated_gcn_layer(p.bind(None), "g", ("only",), Tensor(np.zeros((2, 3))), CompiledEdges.build([0], [0], [0], [0], 3, 3))


def test_compile_span_graph_uses_unk_for_unseen_labels():
    labels = Vocab(["S"])
    compiled = compile_span_graph(build_span_graph(TREE), labels)
    n_labels = len(labels)
    fine = compiled["compose"].fine
    # NP and VP are unknown, so every compose edge except those into S uses label 0
    assert set((fine % n_labels).tolist()) == {0, 1}
    assert compiled["compose"].n_src == 4 and compiled["compose"].n_dst == 3


def full_params(variant, dim=6, d_in=5, seed=0):
    p = ModelParams()
    init = Initializer(np.random.default_rng(seed))
    init_lstm_stack(p, init, "lower", 2, d_in, dim)
    init_lstm_stack(p, init, "top", 2, dim, dim)
    if variant == "spangcn":
        for stage in ("compose", "tree", "decompose"):
            init_gcn_stage(p, init, stage, STAGE_TYPES[stage], 4, dim)
    else:
        init_gcn_stage(p, init, "dep", ("head->dep", "dep->head", "self"), 5, dim)
    return p


def test_spangcn_shape_and_mismatch():
    p = full_params("spangcn")
    graph = compile_span_graph(build_span_graph(TREE), Vocab(["S", "NP", "VP"]))
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    assert spangcn_encode(p.bind(None), x, graph, 2, 2).shape == (4, 6)
    with pytest.raises(EncoderError):
        spangcn_encode(p.bind(None), Tensor(np.zeros((3, 5))), graph, 2, 2)


def test_spangcn_residual_bypass():
    p = full_params("spangcn")
    p["decompose.ln_gain"][...] = 0.0
    p["decompose.ln_bias"][...] = 0.0
    graph = compile_span_graph(build_span_graph(TREE), Vocab(["S", "NP", "VP"]))
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    P = p.bind(None)
    expected = bilstm_encode(P, "top", bilstm_encode(P, "lower", x, 2), 2).value
    assert np.allclose(spangcn_encode(P, x, graph, 2, 2).value, expected, atol=1e-14)


def test_depgcn_shape_and_zero_case():
    p = full_params("depgcn")
    dep = compile_dependency(to_dependency(TREE), Vocab(["S", "NP", "VP", "root"]))
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    assert depgcn_encode(p.bind(None), x, dep, 2, 2).shape == (4, 6)
    for name in p.names():
        if name.startswith("dep."):
            p[name][...] = 0.0
    p["dep.ln_bias"][...] = np.linspace(-1, 1, 6)
    lower = bilstm_encode(p.bind(None), "lower", x, 2)
    words = gated_gcn_layer(p.bind(None), "dep", ("head->dep", "dep->head", "self"), lower, dep).value
    assert np.allclose(words, np.maximum(np.linspace(-1, 1, 6), 0.0))


def test_dependency_edges():
    dep = to_dependency(TREE)
    compiled = compile_dependency(dep, Vocab(dep.labels))
    # one pair per non-root token plus one self loop each
    assert len(compiled.src) == 2 * 3 + 4


def test_embeddings_are_frozen():
    from spangcn.gradcheck import fixture_model, fixture_sentence

    model = fixture_model("spangcn")
    assert "embeddings" not in model.params
    before = model.params.frozen["embeddings"].copy()
    (inst,) = model.instances([fixture_sentence()])
    _, grads = model.loss_and_grads(inst, np.random.default_rng(0))
    assert "embeddings" not in grads
    assert np.array_equal(model.params.frozen["embeddings"], before)
    with pytest.raises(ValueError):
        model.embeddings.matrix[0, 0] = 1.0


def test_full_model_gradient_on_three_token_sentence():
    from spangcn.corpus import AnnotatedSentence, Predicate, RoleSpan
    from spangcn.gradcheck import fixture_model

    sent = AnnotatedSentence(
        ["the", "cat", "sat"], [Predicate(2, [RoleSpan(0, 2, "A0")])], "(S (NP (DT the) (NN cat)) (VP (VBD sat)))"
    )
    model = fixture_model("spangcn", seed=3)
    (inst,) = model.instances([sent])
    result = ad.finite_diff_check(
        lambda params, tape: model.loss(params.bind(tape), inst), model.params, sample=120, rng=np.random.default_rng(0)
    )
    assert result.max_rel_error < 1e-4
