"""Reverse-mode automatic differentiation over dense real tensors.

Define-by-run tape: every operation on ``Tensor`` objects records a
``TapeNode`` holding the parents and a backward rule; ``backward`` walks the
tape in reverse topological order and accumulates gradients into every
reachable parameter. Shapes are explicit — there is no implicit elementwise
broadcasting, and every shape mismatch is rejected with the offending shapes
named.

Supported op kinds (see ``SUPPORTED_OPS``): matmul, add, sub,
elementwise-mul, scalar-mul, concat, slice, sigmoid, tanh, relu, square,
sum, mean, softmax, log, clip, quantize-ste, plus the extensions exp, inv,
add-rowvec, minimum, reshape and diag-embed, which the recurrent codec,
the filter-in-the-loop training path and the PPO losses need. Matmul and
inv accept stacked (batch, n, m) operands so a whole batch of filter
updates runs as one node.

Tensors are float32 or float64. Tapes are single-threaded; run concurrent
rollouts on disjoint parameter copies and apply gradients in a serialized
phase.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "ShapeError",
    "SUPPORTED_OPS",
    "forward_op",
    "backward",
    "zero_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "add_rowvec",
    "concat",
    "slice_",
    "sigmoid",
    "tanh",
    "relu",
    "square",
    "exp",
    "log",
    "sum_",
    "mean_",
    "softmax",
    "clip",
    "minimum",
    "inv",
    "reshape",
    "diag_embed",
    "quantize_midrise",
    "quantize_ste",
    "quantize_ste_backward",
]

_FLOAT_DTYPES = (np.float32, np.float64)

# When True, every forward op asserts its output is finite. Enabled by tests
# that exercise the finiteness invariant; off by default for speed.
CHECK_FINITE = False

_TAPE_ON = True


class no_tape:
    """Context that skips node recording (forward values only)."""

    def __enter__(self):
        global _TAPE_ON
        self._prev = _TAPE_ON
        _TAPE_ON = False
        return self

    def __exit__(self, *exc):
        global _TAPE_ON
        _TAPE_ON = self._prev
        return False


class ShapeError(ValueError):
    pass


class TapeNode:
    """One recorded operation: op tag, parent tensors, backward rule.

    ``backward_fn(grad)`` returns one gradient array (or None) per parent.
    """

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Dense real tensor; records tape nodes when an input requires grad."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # Operator sugar; scalars route to scalar-mul / constant add.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor_like(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor_like(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _as_tensor_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.full(ref.shape, float(value), dtype=ref.data.dtype)
    return Tensor(arr)


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in forward output")
    out = Tensor(data)
    if _TAPE_ON and any(p.requires_grad or p.node is not None for p in parents):
        out.node = TapeNode(op, parents, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


# ---------------------------------------------------------------------------
# binary / unary ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. (n,m)@(m,p), or stacked (B,n,m)@(B,m,p); a 2-d
    operand paired with a stacked one is applied to every stack element."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul: operands must be 2-d or 3-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: stack sizes differ: {a.shape} vs {b.shape}")

    data = a.data @ b.data

    def backward_fn(grad):
        swap_b = np.swapaxes(b.data, -1, -2)
        swap_a = np.swapaxes(a.data, -1, -2)
        ga = grad @ swap_b
        gb = swap_a @ grad
        if a.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if b.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return _result("matmul", data, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _same_shape("elementwise-mul", a, b)
    return _result(
        "elementwise-mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data)
    )


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scalar-mul", a.data * c, (a,), lambda g: (g * c,))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-m vector to every row of an (..., m) tensor (bias add)."""
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"add-rowvec: cannot add vector {v.shape} to rows of {x.shape}")

    def backward_fn(grad):
        gv = grad.reshape(-1, v.shape[0]).sum(axis=0)
        return grad, gv

    return _result("add-rowvec", x.data + v.data, (x, v), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError(f"concat: rank mismatch: {[t.shape for t in tensors]}")
    ax = axis % nd
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        for d in range(nd):
            if d != ax and t.shape[d] != base[d]:
                raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {ax}")
    data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(grad):
        pieces = []
        for i in range(len(tensors)):
            idx = [slice(None)] * nd
            idx[ax] = slice(offsets[i], offsets[i + 1])
            pieces.append(grad[tuple(idx)])
        return tuple(pieces)

    return _result("concat", data, tensors, backward_fn)


def slice_(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    n = x.shape[ax]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {ax} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def backward_fn(grad):
        gx = np.zeros_like(x.data)
        gx[idx] = grad
        return (gx,)

    return _result("slice", x.data[idx], (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return _result("square", x.data * x.data, (x,), lambda g: (g * 2.0 * x.data,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def _reduce(op: str, x: Tensor, axis, fn, scale_from_count: bool):
    data = fn(x.data, axis=axis)
    count = x.data.size if axis is None else x.shape[axis]
    scale = 1.0 / count if scale_from_count else 1.0

    def backward_fn(grad):
        if axis is None:
            g = np.broadcast_to(np.asarray(grad), x.shape).astype(x.data.dtype, copy=True)
        else:
            g = np.broadcast_to(np.expand_dims(grad, axis), x.shape).astype(x.data.dtype, copy=True)
        return (g * scale,)

    return _result(op, np.asarray(data, dtype=x.data.dtype), (x,), backward_fn)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    return _reduce("sum", x, axis, np.sum, scale_from_count=False)


def mean_(x: Tensor, axis: int | None = None) -> Tensor:
    return _reduce("mean", x, axis, np.mean, scale_from_count=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(grad):
        dot = np.sum(grad * y, axis=axis, keepdims=True)
        return ((grad - dot) * y,)

    return _result("softmax", y, (x,), backward_fn)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    lo, hi = float(lo), float(hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return _result("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("minimum", a, b)
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)
    return _result("minimum", data, (a, b), lambda g: (g * take_a, g * ~take_a))


def inv(x: Tensor) -> Tensor:
    """Matrix inverse of (n,n) or stacked (B,n,n) tensors."""
    if x.ndim not in (2, 3) or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"inv: expected square matrices, got {x.shape}")
    y = np.linalg.inv(x.data)

    def backward_fn(grad):
        yt = np.swapaxes(y, -1, -2)
        return (-(yt @ grad @ yt),)

    return _result("inv", y, (x,), backward_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)
    return _result("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def diag_embed(v: Tensor) -> Tensor:
    """Embed (..., n) vectors as (..., n, n) diagonal matrices."""
    n = v.shape[-1]
    data = np.zeros(v.shape + (n,), dtype=v.data.dtype)
    idx = np.arange(n)
    data[..., idx, idx] = v.data
    return _result("diag-embed", data, (v,), lambda g: (g[..., idx, idx],))


# ---------------------------------------------------------------------------
# quantization with straight-through gradients


def quantize_midrise(values: np.ndarray, r_bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform mid-rise quantizer on [-1, 1] with 2**r_bits levels.

    Returns (indices, reconstruction). Exact ties at level boundaries round
    toward +inf; out-of-range inputs clip first. Requires r_bits >= 1.
    """
    r_bits = int(r_bits)
    if r_bits < 1:
        raise ValueError("quantize_midrise: r_bits must be >= 1 (0 bits means no transmission)")
    levels = 1 << r_bits
    step = 2.0 / levels
    clipped = np.clip(values, -1.0, 1.0)
    indices = np.floor((clipped + 1.0) / step).astype(np.int64)
    np.clip(indices, 0, levels - 1, out=indices)
    recon = -1.0 + (indices + 0.5) * step
    return indices, recon.astype(np.asarray(values).dtype)


def quantize_ste_backward(
    upstream: np.ndarray, inputs: np.ndarray, clip_range: tuple[float, float] = (-1.0, 1.0)
) -> np.ndarray:
    """Straight-through gradient: pass upstream where inputs lie inside the
    clip range (inclusive), zero elsewhere."""
    lo, hi = clip_range
    mask = (inputs >= lo) & (inputs <= hi)
    return upstream * mask


def quantize_ste(x: Tensor, r_bits: int) -> Tensor:
    """Mid-rise quantization forward, straight-through estimator backward."""
    _, recon = quantize_midrise(x.data, r_bits)
    xdata = x.data
    return _result(
        "quantize-ste", recon, (x,), lambda g: (quantize_ste_backward(g, xdata),)
    )


# ---------------------------------------------------------------------------
# dispatcher + backward pass

SUPPORTED_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scalar-mul": scalar_mul,
    "concat": concat,
    "slice": slice_,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "square": square,
    "sum": sum_,
    "mean": mean_,
    "softmax": softmax,
    "log": log,
    "clip": clip,
    "quantize-ste": quantize_ste,
    # extensions beyond the minimal kernel
    "exp": exp,
    "inv": inv,
    "add-rowvec": add_rowvec,
    "minimum": minimum,
    "reshape": reshape,
    "diag-embed": diag_embed,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Apply an op by kind tag; unknown kinds are rejected."""
    fn = SUPPORTED_OPS.get(kind)
    if fn is None:
        raise ValueError(f"forward_op: unsupported op kind {kind!r}")
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray] | None:
    """Backpropagate from a scalar loss.

    Accumulates into ``t.grad`` for every reachable tensor with
    ``requires_grad``. When ``params`` is given, returns ``{id(p): grad}``
    covering every listed parameter, with zeros for parameters the loss does
    not reach.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss root must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        if t.node is None:
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = np.asarray(pg, dtype=p.data.dtype).copy()
            else:
                acc += pg

    if params is None:
        return None
    out = {}
    for p in params:
        out[id(p)] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
