"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every primitive applied to tensors that live on it.
Tensors built without a tape are constants and primitives on them just
compute values, which is how evaluation runs.  Parameters are held in
:class:`ModelParams` as plain arrays and bound to a tape per step.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "ModelParams",
    "const",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "concat",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "gather_rows",
    "take",
    "getitem",
    "reshape",
    "transpose",
    "tsum",
    "layer_norm",
    "dropout",
    "dropout_mask",
    "lstm_layer",
    "finite_diff_check",
    "GradCheckResult",
    "relative_error",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        desc = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite value produced by {where}")
        self.where = where


class Tensor:
    __slots__ = ("value", "tape", "grad", "name", "contributions")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.grad: np.ndarray | None = None
        self.name = name
        self.contributions = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def const(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.leaves: dict[str, Tensor] = {}

    def watch(self, name: str, value: np.ndarray) -> Tensor:
        t = self.leaves.get(name)
        if t is None:
            t = Tensor(value, self, name)
            self.leaves[name] = t
        return t

    def record(self, value: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
        out = Tensor(value, self)
        self.records.append((out, inputs, backward))
        return out

    def backward(self, loss: Tensor, params: "ModelParams | None" = None) -> dict[str, np.ndarray]:
        """Propagate d(loss) back through the tape.

        Returns gradients keyed by parameter name; when ``params`` is given,
        every registered parameter gets an entry (zeros if untouched).
        """
        if loss.value.size != 1:
            raise ShapeError("backward (loss must be scalar)", loss.shape)
        if loss.tape is not None and loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.tape is not None:
            loss.grad = np.ones_like(loss.value)
        # a loss off the tape is a constant: every gradient stays zero
        for out, inputs, fn in reversed(self.records if loss.tape is not None else []):
            if out.grad is None:
                continue
            for inp, g in zip(inputs, fn(out.grad)):
                if g is None or inp.tape is None:
                    continue
                inp.contributions += 1
                inp.grad = g if inp.grad is None else inp.grad + g
        grads: dict[str, np.ndarray] = {}
        if params is not None:
            for name, value in params.items():
                leaf = self.leaves.get(name)
                grads[name] = (
                    np.zeros_like(value) if leaf is None or leaf.grad is None else leaf.grad
                )
        else:
            for name, leaf in self.leaves.items():
                grads[name] = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad
        return grads


def _tape_of(*tensors: Tensor) -> Tape | None:
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _finish(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError(op)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(value, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product; a column operand acts as a per-row scalar gate."""
    a, b = const(a), const(b)
    _broadcast_check("mul", a, b)
    av, bv = a.value, b.value
    return _finish(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def neg(a) -> Tensor:
    a = const(a)
    return _finish("neg", -a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _finish("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(const(t) for t in tensors)
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", value, ts, backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = const(a)
    s = _sigmoid(a.value)
    return _finish("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = const(a)
    t = np.tanh(a.value)
    return _finish("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = const(a)
    mask = a.value > 0
    return _finish("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = const(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", s, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = const(a)
    m = a.value.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    out = a.value - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _finish("log_softmax", out, (a,), backward)


def logsumexp(a, axis: int | None = None) -> Tensor:
    a = const(a)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    lse_k = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    w = np.exp(x - lse_k)
    out = lse_k.reshape(()) if axis is None else np.squeeze(lse_k, axis=axis)

    def backward(g):
        gk = g if axis is None else np.expand_dims(g, axis)
        return (gk * w,)

    return _finish("logsumexp", out, (a,), backward)


def gather_rows(a, index) -> Tensor:
    a = const(a)
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _finish("gather_rows", a.value[idx], (a,), backward)


def take(a, flat_index) -> Tensor:
    """Pick entries of ``a`` by flat (row-major) index."""
    a = const(a)
    idx = np.asarray(flat_index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(int(np.prod(shape)))
        np.add.at(full, idx, g)
        return (full.reshape(shape),)

    return _finish("take", a.value.reshape(-1)[idx], (a,), backward)


def getitem(a, key) -> Tensor:
    a = const(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _finish("getitem", a.value[key], (a,), backward)


def reshape(a, shape) -> Tensor:
    a = const(a)
    old = a.shape
    return _finish("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = const(a)
    return _finish("transpose", a.value.T, (a,), lambda g: (g.T,))


def tsum(a, axis: int | None = None) -> Tensor:
    a = const(a)
    shape = a.shape

    def backward(g):
        gk = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return _finish("sum", np.asarray(a.value.sum(axis=axis)), (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance."""
    x, gain, bias = const(x), const(gain), const(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _finish("layer_norm", gv * xhat + bias.value, (x, gain, bias), backward)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    x = const(x)
    if not training or rate == 0.0 or rng is None:
        return x
    return mul(x, Tensor(dropout_mask(x.shape, rate, rng)))


def lstm_layer(x, w_x, w_h, b, reverse: bool = False, hidden_mask: np.ndarray | None = None) -> Tensor:
    """Unidirectional LSTM over the rows of ``x`` (T x d); returns T x h.

    Gate layout in the 4h columns is [input, forget, output, candidate].
    ``hidden_mask`` (length h) multiplies the previous hidden state before it
    enters the recurrence, the same mask at every step.
    """
    x, w_x, w_h, b = const(x), const(w_x), const(w_h), const(b)
    T, d = x.shape
    h = w_h.shape[0]
    if w_x.shape != (d, 4 * h) or w_h.shape != (h, 4 * h) or b.shape != (4 * h,):
        raise ShapeError("lstm_layer", x.shape, w_x.shape, w_h.shape, b.shape)
    mask = np.ones(h) if hidden_mask is None else np.asarray(hidden_mask, dtype=np.float64)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    zx = x.value @ w_x.value + b.value
    wh = w_h.value
    H = np.zeros((T, h))
    C = np.zeros((T, h))
    G = np.zeros((T, 4 * h))  # post-activation gates
    Hin = np.zeros((T, h))  # masked previous hidden state fed at each step
    h_prev = np.zeros(h)
    c_prev = np.zeros(h)
    for t in steps:
        hin = h_prev * mask
        z = zx[t] + hin @ wh
        gates = np.empty(4 * h)
        gates[: 3 * h] = _sigmoid(z[: 3 * h])
        gates[3 * h :] = np.tanh(z[3 * h :])
        i, f, o, gg = gates[:h], gates[h : 2 * h], gates[2 * h : 3 * h], gates[3 * h :]
        c = f * c_prev + i * gg
        hh = o * np.tanh(c)
        H[t], C[t], G[t], Hin[t] = hh, c, gates, hin
        h_prev, c_prev = hh, c
    xv, wxv = x.value, w_x.value
    order = list(steps)

    def backward(gH):
        dZ = np.zeros((T, 4 * h))
        dh_next = np.zeros(h)
        dc_next = np.zeros(h)
        for k in range(T - 1, -1, -1):
            t = order[k]
            c_prev_t = C[order[k - 1]] if k > 0 else np.zeros(h)
            gates = G[t]
            i, f, o, gg = gates[:h], gates[h : 2 * h], gates[2 * h : 3 * h], gates[3 * h :]
            tc = np.tanh(C[t])
            dh = gH[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dZ[t]
            dz[:h] = dc * gg * i * (1.0 - i)
            dz[h : 2 * h] = dc * c_prev_t * f * (1.0 - f)
            dz[2 * h : 3 * h] = dh * tc * o * (1.0 - o)
            dz[3 * h :] = dc * i * (1.0 - gg * gg)
            dh_next = (dz @ wh.T) * mask
            dc_next = dc * f
        return dZ @ wxv.T, xv.T @ dZ, Hin.T @ dZ, dZ.sum(axis=0)

    return _finish("lstm_layer", H, (x, w_x, w_h, b), backward)


# ---------------------------------------------------------------------------
# parameters


class ModelParams:
    """Named float64 parameter arrays in registration order."""

    def __init__(self):
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        self.frozen: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already registered")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if name not in self._values:
            raise KeyError(name)
        if arr.shape != self._values[name].shape:
            raise ShapeError(f"assign {name}", self._values[name].shape, arr.shape)
        self._values[name][...] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def items(self):
        return self._values.items()

    def names(self) -> list[str]:
        return list(self._values)

    def size(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ModelParams":
        other = ModelParams()
        for k, v in self._values.items():
            other._values[k] = v.copy()
        for k, v in self.frozen.items():
            other.frozen[k] = v
        return other

    def bind(self, tape: Tape | None) -> "ParamView":
        return ParamView(self, tape)


class ParamView:
    """Parameter access for one forward pass: tape leaves, or constants."""

    __slots__ = ("params", "tape", "_cache")

    def __init__(self, params: ModelParams, tape: Tape | None):
        self.params = params
        self.tape = tape
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        t = self._cache.get(name)
        if t is None:
            value = self.params[name]
            t = self.tape.watch(name, value) if self.tape is not None else Tensor(value, name=name)
            self._cache[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self.params


# ---------------------------------------------------------------------------
# finite-difference oracle


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


class GradCheckResult(NamedTuple):
    max_rel_error: float
    param: str | None
    index: tuple[int, ...] | None
    checked: int
    max_abs_error: float = 0.0
    # plain relative error over coordinates with |gradient| >= 1e-6
    max_rel_error_large: float = 0.0


def finite_diff_check(
    f: Callable[[ModelParams, Tape | None], Tensor],
    params: ModelParams,
    eps: float = 1e-5,
    sample: int = 200,
    rng: np.random.Generator | None = None,
    abs_tol: float = 1e-8,
) -> GradCheckResult:
    """Compare tape gradients with central differences on sampled coordinates.

    ``f`` must be deterministic.  Every parameter tensor contributes at least
    one coordinate; the rest are drawn uniformly over all coordinates.  A
    coordinate whose analytic and numeric values differ by at most
    ``abs_tol`` counts as agreeing (relative error 0); otherwise its error is
    ``|a - b| / max(|a|, |b|, 1e-8)``.  The worst such error is returned
    together with the largest absolute difference seen and the worst plain
    relative error among coordinates whose gradient is at least 1e-6.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    tape = Tape()
    loss = f(params, tape)
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("objective")
    grads = tape.backward(loss, params)

    names = params.names()
    sizes = np.array([params[n].size for n in names])
    picks: list[tuple[str, int]] = [(n, int(rng.integers(params[n].size))) for n in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in rng.integers(offsets[-1], size=max(sample - len(picks), 0)):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        picks.append((names[k], int(flat - offsets[k])))

    worst_rel, worst_abs, worst_large = 0.0, 0.0, 0.0
    where: tuple[str | None, tuple[int, ...] | None] = (None, None)
    for name, flat in picks:
        arr = params[name]
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = f(params, None).item()
        arr[idx] = orig - eps
        fm = f(params, None).item()
        arr[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective at {name}{tuple(int(i) for i in idx)}")
        numeric = (fp - fm) / (2 * eps)
        analytic = float(grads[name][idx])
        diff = abs(numeric - analytic)
        err = 0.0 if diff <= abs_tol else relative_error(analytic, numeric)
        worst_abs = max(worst_abs, diff)
        if max(abs(numeric), abs(analytic)) >= 1e-6:
            worst_large = max(worst_large, relative_error(analytic, numeric))
        if err > worst_rel or where[0] is None:
            worst_rel = err
            where = (name, tuple(int(i) for i in idx))
    return GradCheckResult(worst_rel, where[0], where[1], len(picks), worst_abs, worst_large)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "spangcn-checkpoint/1"
_MAGIC = b"SPGCNCK1"


def save_checkpoint(path, params: ModelParams, meta: Mapping | None = None) -> None:
    """Binary layout: magic, u64 header length, JSON header, raw little-endian float64."""
    entries = []
    blobs = []
    offset = 0
    for group, store in (("params", params.items()), ("frozen", params.frozen.items())):
        for name, value in store:
            data = np.ascontiguousarray(value, dtype="<f8").tobytes()
            entries.append(
                {"group": group, "name": name, "shape": list(value.shape), "offset": offset}
            )
            blobs.append(data)
            offset += len(data)
    header = json.dumps(
        {"format": CHECKPOINT_FORMAT, "tensors": entries, "meta": dict(meta or {})},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for data in blobs:
            fh.write(data)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        body = fh.read()
    params = ModelParams()
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"]).astype(np.float64)
        arr = arr.reshape(e["shape"])
        if e["group"] == "params":
            params.add(e["name"], arr)
        else:
            params.frozen[e["name"]] = arr
    return params, header["meta"]


def flatten(arrays: Iterable[np.ndarray]) -> np.ndarray:
    parts = [np.ravel(a) for a in arrays]
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class Initializer:
    """Parameter initialization: Xavier-uniform matrices, constant vectors."""

    rng: np.random.Generator

    def xavier(self, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
