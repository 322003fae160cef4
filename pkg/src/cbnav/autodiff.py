"""Reverse-mode automatic differentiation on dense float32 tensors.

A `Tape` records every operation applied to `Tensor` values while it is
active; `Tape.backward` replays the records in reverse to accumulate
gradients. Tapes are rebuilt from scratch on every forward pass and are
single-threaded; independent tapes may run on separate threads.

Shape rules per op (leading batch dimensions broadcast where noted):

    add/sub/mul        numpy broadcasting
    scale              elementwise, static float factor
    matmul             (..., m, k) @ (..., k, n) -> (..., m, n)
    relu/hinge_relu    elementwise, subgradient 0 at 0
    gelu               elementwise (tanh approximation)
    abs                elementwise, subgradient 0 at 0
    softmax_lastdim    normalizes the last axis
    layernorm          (x, gain, bias); normalizes the last axis, eps 1e-5
    embed_linear       (x, W, b): (..., i) @ (i, o) + (o,) -> (..., o)
    concat             along a static axis
    slice              static basic-indexing key
    reshape/transpose  static shape / axes permutation
    causal_mask_fill   (..., L, L); entries with col > row forced to -1e9
    mse/l1             (pred, target) -> scalar mean over all elements
    mean/sum           optional static axis; scalar when axis is None

Reductions (mse, l1, mean, sum) accumulate in float64 and cast the
result back to float32.
"""

from __future__ import annotations

import threading

import numpy as np

DTYPE = np.float32

_GELU_C = float(np.sqrt(2.0 / np.pi))
_MASK_FILL = -1e9
_LAYERNORM_EPS = 1e-5


class AutodiffError(Exception):
    """Base class for graph construction and execution failures."""


class use_dtype:
    """Thread-locally override the working dtype (float64 for grad checks).

    Finite differences of a float32-evaluated function are noise-limited
    near 1e-4 relative error, so verification runs in float64; training
    and deployment stay on the float32 default.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)

    def __enter__(self):
        stack = _dtype_stack()
        stack.append(self.dtype)
        return self

    def __exit__(self, exc_type, exc, tb):
        _dtype_stack().pop()
        return False


def _dtype_stack() -> list:
    stack = getattr(_active, "dtypes", None)
    if stack is None:
        stack = []
        _active.dtypes = stack
    return stack


def current_dtype():
    stack = _dtype_stack()
    return stack[-1] if stack else DTYPE


class ShapeError(AutodiffError):
    """Input shapes incompatible with the requested op."""


class NumericalError(AutodiffError):
    """An op produced a non-finite value."""


class Tensor:
    """Dense float32 value. Leaf or op output in a computation graph.

    The graph structure lives on the recording `Tape`, not on the tensor,
    so parameter tensors can be shared read-only across concurrent tapes.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=current_dtype())
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One op record: inputs, output, and the vector-Jacobian product."""

    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


_active = threading.local()


def _tape_stack() -> list:
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = []
        _active.stack = stack
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered op records plus, after backward, a node-id -> grad map.

    Nodes are appended in creation order, which is topological by
    construction; backward visits each node exactly once in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, op: str, inputs: tuple, out: Tensor, vjp) -> None:
        self.nodes.append(Node(op, inputs, out, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) for every tensor on the tape.

        Leaves unreachable from `loss` simply have no entry; `grad`
        reports zeros for them.
        """
        if loss.data.size != 1:
            raise ShapeError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        self._grads = {}
        self._accumulate(loss, np.ones_like(loss.data))
        for node in reversed(self.nodes):
            entry = self._grads.get(id(node.out))
            if entry is None:
                continue
            in_grads = node.vjp(entry[1])
            for inp, g in zip(node.inputs, in_grads):
                if g is not None:
                    self._accumulate(inp, g)

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        entry = self._grads.get(id(t))
        if entry is None:
            self._grads[id(t)] = (t, np.array(g, dtype=t.data.dtype))
        else:
            np.add(entry[1], g, out=entry[1], casting="unsafe")

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. `t` (zeros if unused)."""
        entry = self._grads.get(id(t))
        if entry is None:
            return np.zeros_like(t.data)
        return entry[1]


def _record(op: str, inputs: tuple, out_data: np.ndarray, vjp) -> Tensor:
    out_data = np.asarray(out_data, dtype=current_dtype())
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(f"op {op!r} produced non-finite values")
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None:
        tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"op {op!r}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _record(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _record(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _record(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    c = a.data.dtype.type(factor)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0), lambda g: (g * mask,))


def hinge_relu(a: Tensor) -> Tensor:
    """max(x, 0) used as a hinge in losses; same kernel as relu."""
    mask = a.data > 0
    return _record("hinge_relu", (a,), np.where(mask, a.data, 0), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        return (g * d,)

    return _record("gelu", (a,), out, vjp)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"op 'matmul': needs >=2-D inputs, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"op 'matmul': inner dims differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"op 'matmul': batch dims differ, {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", (a, b), a.data @ b.data, vjp)


def embed_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on the last axis: x @ w + b."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"op 'embed_linear': x {x.shape}, w {w.shape}, b {b.shape} incompatible"
        )

    def vjp(g):
        gf = g.reshape(-1, w.shape[1])
        xf = x.data.reshape(-1, w.shape[0])
        return g @ w.data.T, xf.T @ gf, gf.sum(axis=0)

    return _record("embed_linear", (x, w, b), x.data @ w.data + b.data, vjp)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(
        "transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),)
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("op 'concat': needs at least one input")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(
        "concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), vjp
    )


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record("slice", (a,), out, vjp)


# ---------------------------------------------------------------------------
# attention / normalization


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax_lastdim", (a,), y, vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"op 'layernorm': gain {gain.shape} / bias {bias.shape} must be ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LAYERNORM_EPS)
    xh = (x.data - mu) * inv

    def vjp(g):
        dxh = g * gain.data
        m1 = dxh.mean(axis=-1, keepdims=True)
        m2 = (dxh * xh).mean(axis=-1, keepdims=True)
        gx = (dxh - m1 - xh * m2) * inv
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xh).sum(axis=lead), g.sum(axis=lead)

    return _record("layernorm", (x, gain, bias), xh * gain.data + bias.data, vjp)


def causal_mask_fill(scores: Tensor) -> Tensor:
    """Force attention scores at col > row to -1e9 on the last two axes."""
    n = scores.shape[-1]
    if scores.data.ndim < 2 or scores.shape[-2] != n:
        raise ShapeError(f"op 'causal_mask_fill': needs (..., L, L), got {scores.shape}")
    keep = np.tril(np.ones((n, n), dtype=bool))
    out = np.where(keep, scores.data, scores.data.dtype.type(_MASK_FILL))
    return _record("causal_mask_fill", (scores,), out, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions


def mean(a: Tensor, axis=None) -> Tensor:
    out = a.data.mean(axis=axis, dtype=np.float64)
    count = a.data.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, g / count),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy(),)

    return _record("mean", (a,), out, vjp)


def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis, dtype=np.float64)

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", (a,), out, vjp)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"op 'mse': shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    out = np.mean(diff * diff)
    n = pred.data.size

    def vjp(g):
        gp = (g * 2.0 / n) * diff
        return gp, -gp

    return _record("mse", (pred, target), out, vjp)


def l1(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"op 'l1': shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    out = np.mean(np.abs(diff))
    n = pred.data.size
    sign = np.sign(diff)

    def vjp(g):
        gp = (g / n) * sign
        return gp, -gp

    return _record("l1", (pred, target), out, vjp)


# ---------------------------------------------------------------------------
# dispatch

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "relu": relu,
    "hinge_relu": hinge_relu,
    "gelu": gelu,
    "abs": absolute,
    "softmax_lastdim": softmax_lastdim,
    "layernorm": layernorm,
    "embed_linear": embed_linear,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "causal_mask_fill": causal_mask_fill,
    "mse": mse,
    "l1": l1,
    "mean": mean,
    "sum": sum_,
}


def op_apply(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a named op to tensor inputs; static args go in kwargs."""
    fn = _OPS.get(kind)
    if fn is None:
        raise AutodiffError(f"unknown op kind {kind!r}")
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def op_kinds() -> tuple[str, ...]:
    return tuple(_OPS)


def grad_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a Tensor to a scalar Tensor and be deterministic. Error is
    |analytic - numeric| / (|numeric| + 1e-8), maximized over elements.
    """
    with use_dtype(np.float64):
        x64 = Tensor(x.data)
        with Tape() as tape:
            y = f(x64)
            tape.backward(y)
            analytic = tape.grad(x64).astype(np.float64)

        numeric = np.zeros(x64.data.size, dtype=np.float64)
        flat = x64.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x64).data)
            flat[i] = orig - eps
            lo = float(f(x64).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)

    err = np.abs(analytic.reshape(-1) - numeric) / (np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0
