"""Dense float64 tensors with reverse-mode differentiation.

Every op evaluates eagerly and records its parents plus a closure that maps
the output gradient to parent gradients.  ``grad`` walks the recorded graph
in reverse topological order.  Broadcasting is limited to scalars and to a
row (1, n) or column (m, 1) vector against an (m, n) matrix; anything else is
a :class:`DimensionError`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    """A node in the compute graph (leaf when it has no parents)."""

    __slots__ = ("value", "parents", "backward_fn", "op", "grad", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def param(value) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn, op):
    return Tensor(value, parents, backward_fn, op)


def eval(expr: Tensor) -> np.ndarray:  # noqa: A001 - mirrors the module contract
    """Forward value of an expression (evaluated eagerly at construction)."""
    return expr.value


# -- broadcasting helpers ---------------------------------------------------

def _check_broadcast(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.value.ndim == 0 or b.value.ndim == 0:
        return
    if a.value.ndim == 2 and b.value.ndim == 2:
        (m1, n1), (m2, n2) = sa, sb
        if n1 == n2 and (m1 == 1 or m2 == 1):
            return
        if m1 == m2 and (n1 == 1 or n2 == 1):
            return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


# -- elementwise binary ops -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)), "div")


# -- unary ops ----------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    v = x.value
    d = np.where(v > 0, 1.0, slope)
    return _node(v * d, (x,), lambda g: (g * d,), "leaky_relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    v = x.value
    return _node(np.log(v), (x,), lambda g: (g / v,), "log")


def square(x: Tensor) -> Tensor:
    v = x.value
    return _node(v * v, (x,), lambda g: (2.0 * g * v,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.value)
    return _node(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def absolute(x: Tensor) -> Tensor:
    v = x.value
    return _node(np.abs(v), (x,), lambda g: (g * np.sign(v),), "abs")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    v = x.value
    keep = v >= floor
    return _node(np.where(keep, v, floor), (x,), lambda g: (g * keep,), "clamp_min")


# -- reductions ---------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    v = x.value
    shape = v.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(v.sum(axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(x: Tensor, axis: int = 1, offset=None) -> Tensor:
    """Row/column log-sum-exp; ``offset`` adds a constant positive mass
    ``exp(offset)`` inside the log (used for the untouched part of a softmax)."""
    v = x.value
    m = v.max(axis=axis, keepdims=True)
    if offset is not None:
        off = np.asarray(offset, dtype=np.float64).reshape(m.shape)
        m = np.maximum(m, off)
    e = np.exp(v - m)
    total = e.sum(axis=axis, keepdims=True)
    if offset is not None:
        total = total + np.exp(off - m)
    out = np.log(total) + m
    soft = e / total

    def back(g):
        return (np.expand_dims(g, axis) * soft,)

    return _node(np.squeeze(out, axis=axis), (x,), back, "logsumexp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.value
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), back, "softmax")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    ga, gb = a.requires_grad, b.requires_grad  # skip products nobody reads

    def back(g):
        return (g @ bv.T if ga else None), (av.T @ g if gb else None)

    return _node(av @ bv, (a, b), back, "matmul")


def spmatmul(A, x: Tensor) -> Tensor:
    """Constant (possibly scipy-sparse) matrix times a tensor."""
    if A.shape[1] != x.shape[0]:
        raise DimensionError(f"spmatmul: incompatible shapes {A.shape} and {x.shape}")
    out = A @ x.value
    At = A.T
    return _node(np.asarray(out), (x,), lambda g: (np.asarray(At @ g),), "spmatmul")


def transpose(x: Tensor) -> Tensor:
    return _node(x.value.T, (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def gather(x: Tensor, index) -> Tensor:
    """Select rows (first axis) by integer index; repeats accumulate."""
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.value[idx], (x,), back, "gather")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.value for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def solve(A: Tensor, b: Tensor) -> Tensor:
    """x = A^{-1} b for square A."""
    A, b = _as_tensor(A), _as_tensor(b)
    Av = A.value
    if Av.ndim != 2 or Av.shape[0] != Av.shape[1] or b.shape[0] != Av.shape[0]:
        raise DimensionError(f"solve: incompatible shapes {Av.shape} and {b.shape}")
    x = np.linalg.solve(Av, b.value)

    def back(g):
        gb = np.linalg.solve(Av.T, g)
        gA = -(gb.reshape(gb.shape[0], -1) @ x.reshape(x.shape[0], -1).T)
        return gA, gb

    return _node(x, (A, b), back, "solve")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine between rows of ``a`` (m, d) and ``b`` (m, d) or (1, d).

    Rows with zero norm produce cosine 0 (their gradient is zero).
    """
    _check_broadcast("cosine_similarity", a, b)
    dot = sum(mul(a, b), axis=1, keepdims=True)
    na = sqrt(add(sum(square(a), axis=1, keepdims=True), eps * eps))
    nb = sqrt(add(sum(square(b), axis=1, keepdims=True), eps * eps))
    out = div(dot, mul(na, nb))
    return reshape(out, (out.shape[0],))


# -- backward pass ------------------------------------------------------------

def _topo(root: Tensor):
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def grad(expr: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """d expr / d leaf for each leaf; ``expr`` must be scalar."""
    if expr.value.size != 1:
        raise ContractError(f"grad: root must be scalar, got shape {expr.shape}")
    grads = {id(expr): np.ones_like(expr.value)}
    for node in reversed(_topo(expr)):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return [grads.get(id(leaf), np.zeros(leaf.shape)) for leaf in leaves]


# -- optimisation -------------------------------------------------------------

def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = math.sqrt(float(np.sum([np.sum(g * g) for g in grads])))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


def cosine_rate(lr: float, position: float) -> float:
    return lr * 0.5 * (1.0 + math.cos(math.pi * position))


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float, schedule_position: float) -> AdamState:
    """In-place Adam update with cosine-decayed rate; returns the state."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= schedule_position <= 1.0:
        raise ValueError("schedule_position must lie in [0, 1]")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient, Adam step aborted")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step += 1
    rate = cosine_rate(lr, schedule_position)
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p.value = p.value - rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5):
    """Max relative error between reverse-mode and central differences."""
    root = fn()
    analytic = grad(root, leaves)
    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.value.reshape(-1)
        num = np.zeros(flat.size)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            hi = float(fn().value)
            flat[k] = old - step
            lo = float(fn().value)
            flat[k] = old
            num[k] = (hi - lo) / (2 * step)
        ga = ga.reshape(-1)
        err = np.abs(ga - num) / np.maximum(np.maximum(np.abs(ga), np.abs(num)), 1e-6)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
