"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the grounding model needs are provided. Apart from
``add_bias`` nothing broadcasts implicitly; use ``broadcast_to`` to align
shapes explicitly.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

# finite-value check after every op; QG_DEBUG=0 disables it
CHECK_FINITE = os.environ.get("QG_DEBUG", "1") != "0"

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


@contextmanager
def no_grad():
    """Build values without recording parents or backward rules."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Value:
    """A node of the computation graph.

    ``data`` is treated as immutable once the node exists. ``grad`` is
    allocated lazily by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str = "", *,
                 _parents: tuple = (), _backward: Callable | None = None, _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{_op}: non-finite values in output of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return self.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(op={self._op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        return backward(self)


def _lift(x, like: Value) -> Value:
    if isinstance(x, Value):
        return x
    if np.isscalar(x):
        return constant(np.full(like.shape, float(x)))
    return constant(x)


def constant(data) -> Value:
    return Value(data, requires_grad=False, _op="const")


def parameter(data, name: str = "") -> Value:
    return Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(data, parents: Sequence[Value], rule: Callable, op: str) -> Value:
    if not _grad_enabled or not any(p.requires_grad or p._parents for p in parents):
        return Value(data, _op=op)
    return Value(data, _parents=tuple(parents), _backward=rule, _op=op)


def _accum(v: Value, g: np.ndarray):
    if v.grad is None:
        v.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        v.grad += g


def _same_shape(op: str, a: Value, b: Value):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- elementwise

def add(a: Value, b: Value) -> Value:
    _same_shape("add", a, b)

    def rule(g):
        return g, g
    return _node(a.data + b.data, (a, b), rule, "add")


def sub(a: Value, b: Value) -> Value:
    _same_shape("sub", a, b)

    def rule(g):
        return g, -g
    return _node(a.data - b.data, (a, b), rule, "sub")


def mul(a: Value, b: Value) -> Value:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def rule(g):
        return g * bd, g * ad
    return _node(ad * bd, (a, b), rule, "mul")


def scale(a: Value, c: float) -> Value:
    def rule(g):
        return (g * c,)
    return _node(a.data * c, (a,), rule, "scale")


def add_bias(x: Value, b: Value) -> Value:
    """Add a vector along the last axis of ``x``."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        return g, g.sum(axis=lead) if lead else g
    return _node(x.data + b.data, (x, b), rule, "add_bias")


def relu(x: Value) -> Value:
    mask = x.data > 0

    def rule(g):
        return (g * mask,)
    return _node(np.where(mask, x.data, 0.0), (x,), rule, "relu")


def sigmoid(x: Value) -> Value:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def rule(g):
        return (g * out * (1.0 - out),)
    return _node(out, (x,), rule, "sigmoid")


def log(x: Value) -> Value:
    if np.any(x.data <= 0):
        raise NonFiniteError(f"log: non-positive input of shape {x.shape}")
    xd = x.data

    def rule(g):
        return (g / xd,)
    return _node(np.log(xd), (x,), rule, "log")


def clip(x: Value, lo: float, hi: float) -> Value:
    """Clamp to [lo, hi]; gradient passes only where the value was inside."""
    inside = (x.data >= lo) & (x.data <= hi)

    def rule(g):
        return (g * inside,)
    return _node(np.clip(x.data, lo, hi), (x,), rule, "clip")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Value, b: Value) -> Value:
    """Matrix product over the last two axes.

    Leading axes must match exactly, except that a 2-D ``b`` is applied to
    every leading index of ``a`` (a shared weight matrix).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb
    return _node(ad @ bd, (a, b), rule, "matmul")


def transpose(x: Value) -> Value:
    if x.ndim < 2:
        raise ShapeError(f"transpose: needs ndim >= 2, got {x.shape}")

    def rule(g):
        return (np.swapaxes(g, -1, -2),)
    return _node(np.swapaxes(x.data, -1, -2), (x,), rule, "transpose")


# ---------------------------------------------------------------- reductions

def _sequential_sum(a: np.ndarray, axis: int) -> np.ndarray:
    # left-to-right accumulation; numpy's pairwise sum would reorder the additions
    if a.shape[axis] == 0:
        return np.sum(a, axis=axis)
    return np.take(np.add.accumulate(a, axis=axis), -1, axis=axis)


def sum(x: Value, axis: int | None = None) -> Value:  # noqa: A001
    """Sum over one axis, or over everything in row-major order."""
    if axis is None:
        def rule(g):
            return (np.full(x.shape, float(g)),)
        return _node(_sequential_sum(x.data.reshape(-1), 0), (x,), rule, "sum")
    ax = _axis(axis, x.ndim, "sum")

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)
    return _node(_sequential_sum(x.data, ax), (x,), rule, "sum")


def mean(x: Value, axis: int | None = None) -> Value:
    n = x.data.size if axis is None else x.shape[_axis(axis, x.ndim, "mean")]
    return scale(sum(x, axis), 1.0 / n)


def max(x: Value, axis: int) -> Value:  # noqa: A001
    """Max over one axis; the gradient goes to the first maximal entry."""
    ax = _axis(axis, x.ndim, "max")
    idx = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(idx, ax), ax).squeeze(ax)

    def rule(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, np.expand_dims(idx, ax), np.expand_dims(g, ax), ax)
        return (gx,)
    return _node(out, (x,), rule, "max")


def softmax(x: Value, axis: int = -1) -> Value:
    ax = _axis(axis, x.ndim, "softmax")
    z = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def rule(g):
        return (out * (g - np.sum(g * out, axis=ax, keepdims=True)),)
    return _node(out, (x,), rule, "softmax")


def log_softmax(x: Value, axis: int = -1) -> Value:
    ax = _axis(axis, x.ndim, "log_softmax")
    z = x.data - np.max(x.data, axis=ax, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def rule(g):
        return (g - p * np.sum(g, axis=ax, keepdims=True),)
    return _node(out, (x,), rule, "log_softmax")


# ---------------------------------------------------------------- structure

def concat(xs: Sequence[Value]) -> Value:
    """Concatenate along the last axis."""
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape}")
    cuts = np.cumsum([x.shape[-1] for x in xs])[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=-1))
    return _node(np.concatenate([x.data for x in xs], axis=-1), tuple(xs), rule, "concat")


def reshape(x: Value, shape: Sequence[int]) -> Value:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def rule(g):
        return (g.reshape(x.shape),)
    return _node(out, (x,), rule, "reshape")


def broadcast_to(x: Value, shape: Sequence[int]) -> Value:
    """Explicitly tile size-1 axes (same rank) up to ``shape``."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"broadcast_to: shape mismatch {x.shape} vs {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)

    def rule(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)
    return _node(np.broadcast_to(x.data, shape).copy(), (x,), rule, "broadcast_to")


def take(x: Value, index) -> Value:
    """Basic numpy indexing (ints and slices)."""
    out = x.data[index]

    def rule(g):
        gx = np.zeros(x.shape)
        gx[index] = g
        return (gx,)
    return _node(np.array(out), (x,), rule, "take")


def pad(x: Value, axis: int, before: int, after: int) -> Value:
    """Zero-pad one axis."""
    ax = _axis(axis, x.ndim, "pad")
    widths = [(0, 0)] * x.ndim
    widths[ax] = (before, after)
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(before, before + x.shape[ax])
    sl = tuple(sl)

    def rule(g):
        return (g[sl],)
    return _node(np.pad(x.data, widths), (x,), rule, "pad")


# ---------------------------------------------------------------- backward

def _toposort(root: Value) -> list[Value]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Value) -> list[Value]:
    """Populate ``grad`` on every parameter leaf reachable from ``root``.

    Gradients accumulate into existing ``grad`` arrays, so callers zero them
    between steps. Returns the parameter leaves that were reached.
    """
    if root.data.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if not node._parents:
            if node.requires_grad:
                _accum(node, np.zeros(node.shape) if g is None else g)
                leaves.append(node)
            continue
        if g is None:
            continue
        if node._backward is None:
            raise GraphError(f"backward: node {node!r} has no backward rule")
        for p, gp in zip(node._parents, node._backward(g)):
            if not (p.requires_grad or p._parents):
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    return leaves


def zero_grad(params):
    for p in params:
        p.grad = None


def gradcheck(builder: Callable[[np.random.Generator], tuple[Value, Sequence[Value]]],
              seed: int = 0, h: float = 1e-5, max_entries: int | None = None) -> float:
    """Compare analytic gradients with central differences.

    ``builder(rng, leaves=None)`` returns ``(loss, leaves)``. The first call
    creates the leaves; later calls receive them back (with one entry
    perturbed in place) and must rebuild the loss from them. Returns
    max |a - n| / max(1, |a|, |n|) over every leaf entry, or over
    ``max_entries`` entries drawn without replacement when given.
    """
    rng = np.random.default_rng(seed)
    loss, leaves = builder(rng, None)
    if not leaves:
        return 0.0
    zero_grad(leaves)
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in leaves]

    def evaluate() -> float:
        with no_grad():
            out, _ = builder(np.random.default_rng(seed), leaves)
        return float(out.data)

    entries = [(k, i) for k, p in enumerate(leaves) for i in range(p.data.size)]
    if max_entries is not None and max_entries < len(entries):
        pick = np.random.default_rng(seed + 7919).choice(len(entries), max_entries, replace=False)
        entries = [entries[j] for j in sorted(pick)]
    worst = 0.0
    for k, i in entries:
        p, a = leaves[k], analytic[k]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate()
        flat[i] = orig - h
        down = evaluate()
        flat[i] = orig
        num = (up - down) / (2 * h)
        ai = a.reshape(-1)[i]
        worst = np.maximum(worst, abs(ai - num) / np.maximum(1.0, np.maximum(abs(ai), abs(num))))
    return float(worst)
