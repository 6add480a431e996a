import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spangcn import autodiff as ad
from spangcn.autodiff import (
    ModelParams,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    finite_diff_check,
    load_checkpoint,
    save_checkpoint,
)


def test_relu_softmax_matmul_examples():
    assert np.array_equal(ad.relu(Tensor([-1.0, 2.0])).value, [0.0, 2.0])
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0])).value, [0.5, 0.5])
    out = ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1) and not out.value.any()


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(info.value)
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        ad.mul(Tensor([np.inf]), Tensor([0.0]))


def test_logsumexp_is_stable():
    v = ad.logsumexp(Tensor([1000.0, 1000.0])).item()
    assert v == pytest.approx(1000.0 + np.log(2.0))


@pytest.mark.parametrize(
    "x, expected",
    [
        ([1.0, 1.0, 1.0], [0.0, 0.0, 0.0]),
        ([1.0, -1.0], [1.0, -1.0]),
        ([2.0, 4.0, 6.0], [-1.2247, 0.0, 1.2247]),
    ],
)
def test_layer_norm_examples(x, expected):
    n = len(x)
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(n)), Tensor(np.zeros(n)), 1e-5).value
    assert np.allclose(out, expected, atol=1e-4)


def test_layer_norm_hand_value():
    out = ad.layer_norm(Tensor([2.0, 4.0, 6.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-12).value
    assert out[2] == pytest.approx(2.0 / np.sqrt(8.0 / 3.0), rel=1e-9)


def test_backward_square():
    tape = Tape()
    x = tape.watch("x", np.array(3.0))
    grads = tape.backward(x * x)
    assert grads["x"] == pytest.approx(6.0)


def test_backward_sigmoid_at_zero():
    tape = Tape()
    x = tape.watch("x", np.array(0.0))
    assert tape.backward(ad.sigmoid(x))["x"] == pytest.approx(0.25)


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.watch("x", np.ones(2))
    with pytest.raises(ShapeError):
        tape.backward(x * x)


def test_fan_out_accumulates():
    # x feeds three uses: x*x (twice) and +x
    tape = Tape()
    x = tape.watch("x", np.array(2.0))
    grads = tape.backward(x * x + x)
    assert grads["x"] == pytest.approx(5.0)
    assert x.contributions == 3


def test_untouched_params_get_zero_grads():
    params = ModelParams()
    params.add("a", np.ones(2))
    params.add("b", np.ones(3))
    tape = Tape()
    P = params.bind(tape)
    grads = tape.backward(ad.tsum(P["a"] * P["a"]), params)
    assert np.array_equal(grads["b"], np.zeros(3))
    assert np.allclose(grads["a"], [2.0, 2.0])


def test_dropout_identity_when_off():
    x = Tensor(np.arange(5.0))
    rng = np.random.default_rng(0)
    assert ad.dropout(x, 0.0, rng) is x
    assert ad.dropout(x, 0.5, rng, training=False) is x


def test_dropout_mask_is_inverted():
    mask = ad.dropout_mask((200_000,), 0.25, np.random.default_rng(0))
    assert set(np.unique(mask)) <= {0.0, 1.0 / 0.75}
    assert mask.mean() == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ValueError):
        ad.dropout_mask((3,), 1.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# primitive gradients against central differences


def _check(f, shapes, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in shapes.items():
        params.add(name, rng.normal(0.0, scale, size=shape))
    return finite_diff_check(lambda p, tape: f(p.bind(tape)), params, sample=60, rng=rng)


PRIMITIVE_CASES = {
    "matmul": (lambda P: ad.tsum(ad.tanh(P["a"] @ P["b"])), {"a": (3, 4), "b": (4, 2)}),
    "add_broadcast": (lambda P: ad.tsum(ad.tanh(P["a"] + P["b"])), {"a": (3, 4), "b": (4,)}),
    "mul_broadcast": (lambda P: ad.tsum(ad.tanh(P["a"] * P["b"])), {"a": (3, 4), "b": (3, 1)}),
    "sub": (lambda P: ad.tsum(ad.tanh(P["a"] - P["b"])), {"a": (3,), "b": (3,)}),
    "concat": (lambda P: ad.tsum(ad.tanh(ad.concat([P["a"], P["b"]], axis=1))), {"a": (2, 2), "b": (2, 3)}),
    "sigmoid": (lambda P: ad.tsum(ad.sigmoid(P["a"]) * P["b"]), {"a": (5,), "b": (5,)}),
    "softmax": (lambda P: ad.tsum(ad.softmax(P["a"], axis=1) * P["b"]), {"a": (3, 4), "b": (3, 4)}),
    "log_softmax": (lambda P: ad.tsum(ad.log_softmax(P["a"], axis=1) * P["b"]), {"a": (3, 4), "b": (3, 4)}),
    "logsumexp": (lambda P: ad.tsum(ad.logsumexp(P["a"], axis=0)), {"a": (3, 4)}),
    "gather_rows": (lambda P: ad.tsum(ad.tanh(ad.gather_rows(P["a"], [0, 2, 0]))), {"a": (3, 2)}),
    "take": (lambda P: ad.tsum(ad.tanh(ad.take(P["a"], [1, 4, 4]))), {"a": (2, 3)}),
    "getitem": (lambda P: ad.tsum(ad.tanh(P["a"][1:3])), {"a": (4, 2)}),
    "reshape_T": (lambda P: ad.tsum(ad.tanh(ad.reshape(P["a"], (3, 2)).T @ P["b"])), {"a": (2, 3), "b": (3, 1)}),
    "layer_norm": (
        lambda P: ad.tsum(ad.tanh(ad.layer_norm(P["x"], P["g"], P["b"]))),
        {"x": (3, 4), "g": (4,), "b": (4,)},
    ),
    "neg": (lambda P: ad.tsum(ad.tanh(-P["a"])), {"a": (3,)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    f, shapes = PRIMITIVE_CASES[name]
    result = _check(f, shapes)
    assert result.max_rel_error < 1e-6, result


def test_relu_gradient_away_from_kink():
    params = ModelParams()
    params.add("a", np.array([-1.5, -0.3, 0.4, 2.0]))
    result = finite_diff_check(lambda p, tape: ad.tsum(ad.relu(p.bind(tape)["a"]) * 3.0), params, sample=10)
    assert result.max_rel_error < 1e-8


def _reference_lstm(x, w_x, w_h, b, reverse, mask):
    """Composed-primitive LSTM, one step at a time."""
    T = x.shape[0]
    h = w_h.shape[0]
    h_prev = Tensor(np.zeros((1, h)))
    c_prev = Tensor(np.zeros((1, h)))
    rows = [None] * T
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        z = x[t : t + 1] @ w_x + (h_prev * Tensor(mask)) @ w_h + b
        i = ad.sigmoid(z[:, :h])
        f = ad.sigmoid(z[:, h : 2 * h])
        o = ad.sigmoid(z[:, 2 * h : 3 * h])
        g = ad.tanh(z[:, 3 * h :])
        c_prev = f * c_prev + i * g
        h_prev = o * ad.tanh(c_prev)
        rows[t] = h_prev
    return ad.concat(rows, axis=0)


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_lstm_matches_reference(reverse):
    rng = np.random.default_rng(3)
    params = ModelParams()
    params.add("x", rng.normal(size=(5, 3)))
    params.add("w_x", rng.normal(0, 0.5, size=(3, 8)))
    params.add("w_h", rng.normal(0, 0.5, size=(2, 8)))
    params.add("b", rng.normal(0, 0.5, size=8))
    weights = rng.normal(size=(5, 2))
    mask = np.array([2.0, 0.0])

    def run(fn):
        tape = Tape()
        P = params.bind(tape)
        out = fn(P["x"], P["w_x"], P["w_h"], P["b"], reverse, mask)
        loss = ad.tsum(out * Tensor(weights))
        return out.value, tape.backward(loss, params)

    fused_out, fused_g = run(lambda x, a, b_, c, r, m: ad.lstm_layer(x, a, b_, c, reverse=r, hidden_mask=m))
    ref_out, ref_g = run(_reference_lstm)
    assert np.allclose(fused_out, ref_out, atol=1e-12)
    for name in params.names():
        assert np.allclose(fused_g[name], ref_g[name], atol=1e-12), name


def test_lstm_gradient_finite_difference():
    result = _check(
        lambda P: ad.tsum(ad.tanh(ad.lstm_layer(P["x"], P["wx"], P["wh"], P["b"], reverse=True))),
        {"x": (4, 3), "wx": (3, 8), "wh": (2, 8), "b": (8,)},
        scale=0.7,
    )
    assert result.max_rel_error < 1e-6


# ---------------------------------------------------------------------------
# the oracle itself


def test_finite_diff_quadratic_is_exact():
    params = ModelParams()
    params.add("theta", np.array([1.0, 2.0]))
    result = finite_diff_check(lambda p, tape: ad.tsum(p.bind(tape)["theta"] * p.bind(tape)["theta"]), params, sample=10)
    assert result.max_rel_error < 1e-9


def test_finite_diff_constant_function():
    params = ModelParams()
    params.add("theta", np.array([1.0, 2.0]))
    result = finite_diff_check(lambda p, tape: Tensor(np.array(4.2)), params, sample=10)
    assert result.max_rel_error == 0.0
    assert result.max_abs_error <= 1e-8


def test_finite_diff_non_finite_objective():
    params = ModelParams()
    params.add("theta", np.array([1.0]))
    with pytest.raises(NonFiniteError):
        finite_diff_check(lambda p, tape: Tensor(np.array(np.nan)), params, sample=1)


def test_finite_diff_covers_every_param():
    params = ModelParams()
    for k in range(5):
        params.add(f"p{k}", np.ones(2))
    result = finite_diff_check(lambda p, tape: ad.tsum(p.bind(tape)["p0"]), params, sample=3)
    assert result.checked == 5


def test_finite_diff_catches_a_wrong_backward():
    def bad_square(a):
        return ad._finish("bad", a.value**2, (a,), lambda g: (g * a.value,))  # missing factor 2

    params = ModelParams()
    params.add("theta", np.array([0.5, -1.3, 2.0]))
    result = finite_diff_check(lambda p, tape: ad.tsum(bad_square(p.bind(tape)["theta"])), params, sample=6)
    assert result.max_rel_error > 0.4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-5, 5)))
def test_softmax_sums_to_one(x):
    assert ad.softmax(Tensor(x)).value.sum() == pytest.approx(1.0)
    assert ad.logsumexp(Tensor(x)).item() == pytest.approx(np.log(np.exp(x).sum()))


def test_checkpoint_round_trip(tmp_path):
    params = ModelParams()
    params.add("w", np.arange(6.0).reshape(2, 3))
    params.add("s", np.array(1.5))
    params.frozen["emb"] = np.ones((2, 2))
    save_checkpoint(tmp_path / "ck.bin", params, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "ck.bin")
    assert meta == {"note": "x"}
    assert loaded.names() == ["w", "s"]
    assert np.array_equal(loaded["w"], params["w"]) and loaded["s"].shape == ()
    assert np.array_equal(loaded.frozen["emb"], np.ones((2, 2)))


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_flatten():
    assert np.array_equal(ad.flatten(iter([np.ones(2), np.zeros((1, 2))])), [1, 1, 0, 0])
    assert ad.flatten([]).size == 0
