"""Reverse-mode autodiff over a small fixed operation set.

Tensors wrap float64 numpy arrays. Every op records a node on a
thread-local tape when recording is enabled and any input requires
grad; backward() replays the tape once in reverse and then consumes
it. The op set is closed: op_forward() dispatches only the kinds
listed in OP_KINDS and anything else is an error.

Backward rules live in module-level _*_bwd functions so a test can
monkeypatch one and watch grad_check fail.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

LAYER_NORM_EPS = 1e-5

OP_KINDS = (
    "matmul",
    "add",
    "mul",
    "softmax-rows",
    "log",
    "exp",
    "layer-norm",
    "relu",
    "embedding-lookup",
    "concat-rows",
    "slice-rows",
    "masked-fill",
    "sum",
    "mean",
    "transpose",
)


class NumcoreError(ValueError):
    """Base class for engine errors."""


class DTypeError(NumcoreError):
    pass


class ShapeError(NumcoreError):
    pass


class UnknownOpError(NumcoreError):
    pass


class TapeError(NumcoreError):
    pass


class Tensor:
    """A float64 array plus grad bookkeeping.

    data is always a numpy float64 array; grad is None until backward
    reaches this tensor. node is the tape entry that produced it (None
    for leaves).
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray):
            if data.dtype != np.float64:
                raise DTypeError(f"tensor data must be float64, got {data.dtype}")
            self.data = data
        else:
            self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Node:
    """One recorded op: calls back(out_grad) -> per-parent grads."""

    __slots__ = ("op", "out", "parents", "back", "tape")

    def __init__(self, op, out, parents, back, tape):
        self.op = op
        self.out = out
        self.parents = parents
        self.back = back
        self.tape = tape


class Tape:
    """Ordered op record. Creation order is topological order."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False


_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "tape"):
        _STATE.tape = None
        _STATE.recording = True
    return _STATE


def active_tape() -> Tape | None:
    return _state().tape


class no_grad:
    """Context manager: ops inside record nothing."""

    def __enter__(self):
        st = _state()
        self._prev = st.recording
        st.recording = False
        return self

    def __exit__(self, *exc):
        _state().recording = self._prev
        return False


def _record(op: str, out: Tensor, parents: tuple[Tensor, ...], back) -> Tensor:
    st = _state()
    if st.recording and any(p.requires_grad for p in parents):
        tape = st.tape
        if tape is None or tape.consumed:
            tape = Tape()
            st.tape = tape
        out.requires_grad = True
        node = Node(op, out, parents, back, tape)
        out.node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate grads of loss into every reachable leaf tensor.

    loss must be a scalar produced on the calling thread's tape. Each
    node is visited exactly once, in reverse creation order; the tape
    is consumed afterwards and a second backward raises. Grads of op
    outputs are transient: each is freed once its producing node has
    been walked, so only tensors the caller created (params, inputs)
    still hold a grad when this returns.
    """
    if loss.node is None:
        raise TapeError("backward target was not produced by a recorded op")
    tape = loss.node.tape
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    if loss.data.shape not in ((), (1,), (1, 1)):
        raise ShapeError(f"backward target must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        og = node.out.grad
        if og is not None:
            grads = node.back(og)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if isinstance(g, np.ndarray) else g
                else:
                    parent.grad = parent.grad + g
        # This node is spent: every consumer of its output sits later on
        # the tape and has already run. Dropping out/parents/back here
        # breaks the tensor<->node reference cycle, so activation arrays
        # are refcount-freed mid-walk instead of waiting for the cycle
        # collector, and peak memory stays near the forward-pass size.
        node.out.grad = None
        node.out = None
        node.parents = ()
        node.back = None
    tape.nodes.clear()
    tape.consumed = True
    if _state().tape is tape:
        _STATE.tape = None


def _is_scalar(x: Tensor) -> bool:
    return x.data.ndim == 0 or x.data.size == 1


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse a broadcasted grad back onto a scalar operand
    return np.asarray(g).sum().reshape(shape) if shape != np.shape(g) else g


# ---- backward rules (module level so tests can corrupt one) ----


def _matmul_bwd(g, a, b):
    return g @ b.T, a.T @ g


def _mul_bwd(g, a, b):
    return g * b, g * a


def _softmax_bwd(g, s):
    # d softmax: s * (g - sum(g*s, last axis))
    inner = (g * s).sum(axis=-1, keepdims=True)
    return (s * (g - inner),)


def _layer_norm_bwd(g, xhat, inv_std):
    # y = xhat = (x - mean) * inv_std, stats over the last axis
    gx = g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
    return (gx * inv_std,)


# ---- ops ----


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul expects (m,k)@(k,n), got {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def back(g):
        return _matmul_bwd(g, ad, bd)

    return _record("matmul", out, (a, b), back)


def _elementwise_pair(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(
            f"{op} needs equal shapes or a scalar operand, got {a.data.shape} vs {b.data.shape}"
        )


def add(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_pair("add", a, b)
    out = Tensor(a.data + b.data)
    a_shape, b_shape = a.data.shape, b.data.shape

    def back(g):
        return _reduce_to(g, a_shape), _reduce_to(g, b_shape)

    return _record("add", out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_pair("mul", a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    a_shape, b_shape = a.data.shape, b.data.shape

    def back(g):
        ga, gb = _mul_bwd(g, ad, bd)
        return _reduce_to(ga, a_shape), _reduce_to(gb, b_shape)

    return _record("mul", out, (a, b), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Stable softmax over the last axis (max subtracted first)."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"softmax-rows expects 1-D or 2-D input, got {x.data.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def back(g):
        return _softmax_bwd(g, s)

    return _record("softmax-rows", out, (x,), back)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    xd = x.data

    def back(g):
        return (g / xd,)

    return _record("log", out, (x,), back)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e)

    def back(g):
        return (g * e,)

    return _record("exp", out, (x,), back)


def layer_norm(x: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"layer-norm expects 1-D or 2-D input, got {x.data.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mean) * inv_std
    out = Tensor(xhat)

    def back(g):
        return _layer_norm_bwd(g, xhat, inv_std)

    return _record("layer-norm", out, (x,), back)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    pos = x.data > 0

    def back(g):
        return (g * pos,)

    return _record("relu", out, (x,), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of table (V,d) at integer ids -> (len(ids), d)."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding-lookup table must be 2-D, got {table.data.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding-lookup ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0,{table.data.shape[0]}): {int(idx.min())}..{int(idx.max())}"
        )
    out = Tensor(table.data[idx])
    vshape = table.data.shape

    def back(g):
        gt = np.zeros(vshape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("embedding-lookup", out, (table,), back)


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat-rows needs at least one input")
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != parts[0].data.shape[1]:
            raise ShapeError(
                f"concat-rows needs 2-D inputs with equal columns, got {[q.data.shape for q in parts]}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.data.shape[0] for p in parts]

    def back(g):
        grads, at = [], 0
        for s in sizes:
            grads.append(g[at : at + s])
            at += s
        return tuple(grads)

    return _record("concat-rows", out, tuple(parts), back)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice-rows expects 2-D input, got {x.data.shape}")
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(f"slice-rows bounds [{start}:{stop}] outside 0..{x.data.shape[0]}")
    out = Tensor(x.data[start:stop].copy())
    xshape = x.data.shape

    def back(g):
        gx = np.zeros(xshape)
        gx[start:stop] = g
        return (gx,)

    return _record("slice-rows", out, (x,), back)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Where mask is True the output is value; grad flows only off-mask."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.data.shape:
        raise ShapeError(f"masked-fill mask shape {m.shape} != input shape {x.data.shape}")
    out = Tensor(np.where(m, float(value), x.data))
    keep = ~m

    def back(g):
        return (g * keep,)

    return _record("masked-fill", out, (x,), back)


def tsum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    xshape = x.data.shape

    def back(g):
        return (np.broadcast_to(g, xshape).copy() if xshape else np.asarray(g),)

    return _record("sum", out, (x,), back)


def tmean(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())
    xshape = x.data.shape
    n = x.data.size

    def back(g):
        return (np.broadcast_to(g / n, xshape).copy() if xshape else np.asarray(g),)

    return _record("mean", out, (x,), back)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D input, got {x.data.shape}")
    out = Tensor(x.data.T.copy())

    def back(g):
        return (g.T,)

    return _record("transpose", out, (x,), back)


_DISPATCH = {
    "matmul": lambda inputs, kw: matmul(*inputs),
    "add": lambda inputs, kw: add(*inputs),
    "mul": lambda inputs, kw: mul(*inputs),
    "softmax-rows": lambda inputs, kw: softmax_rows(*inputs),
    "log": lambda inputs, kw: log(*inputs),
    "exp": lambda inputs, kw: exp(*inputs),
    "layer-norm": lambda inputs, kw: layer_norm(*inputs),
    "relu": lambda inputs, kw: relu(*inputs),
    "embedding-lookup": lambda inputs, kw: embedding_lookup(inputs[0], kw["ids"]),
    "concat-rows": lambda inputs, kw: concat_rows(inputs),
    "slice-rows": lambda inputs, kw: slice_rows(inputs[0], kw["start"], kw["stop"]),
    "masked-fill": lambda inputs, kw: masked_fill(inputs[0], kw["mask"], kw["value"]),
    "sum": lambda inputs, kw: tsum(*inputs),
    "mean": lambda inputs, kw: tmean(*inputs),
    "transpose": lambda inputs, kw: transpose(*inputs),
}


def op_forward(kind: str, inputs, **kw) -> Tensor:
    """Dispatch one op by kind. Non-tensor operands (ids, masks, slice
    bounds, fill values) ride as keywords; differentiable operands are
    the Tensor list."""
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise UnknownOpError(f"unknown op kind {kind!r}; known kinds: {', '.join(OP_KINDS)}")
    return fn(list(inputs), kw)


# ---- gradient checking ----


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    ok: bool
    worst: str = ""


def grad_check(f, x, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic grads of scalar f against central differences.

    x is one Tensor or a sequence of Tensors; every element of every
    tensor is perturbed by +-step. f must be deterministic: two forward
    passes must agree bit for bit, otherwise this raises.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    y1 = f(*xs)
    backward(y1)
    analytic = [np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad, dtype=np.float64) for t in xs]

    with no_grad():
        y2 = f(*xs)
        if y1.data.tobytes() != y2.data.tobytes():
            raise TapeError("grad_check target is non-deterministic across forward passes")

        max_rel, n, worst = 0.0, 0, ""
        for ti, t in enumerate(xs):
            flat = t.data.reshape(-1)
            aflat = analytic[ti].reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                up = float(f(*xs).data)
                flat[i] = keep - step
                dn = float(f(*xs).data)
                flat[i] = keep
                numeric = (up - dn) / (2.0 * step)
                denom = max(abs(aflat[i]), abs(numeric), 1e-8)
                rel = abs(aflat[i] - numeric) / denom
                n += 1
                if rel > max_rel:
                    max_rel = rel
                    worst = f"tensor {ti} flat index {i}: analytic {aflat[i]:.6g} numeric {numeric:.6g}"

    return GradCheckReport(max_rel_err=max_rel, n_checked=n, ok=max_rel < tol, worst=worst)
