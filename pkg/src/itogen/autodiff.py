"""Reverse-mode automatic differentiation for small dense networks.

Every op accepts either `Node` objects or plain numpy arrays. When all
inputs are arrays the op just computes numerics (evaluation mode, no
graph); when any input is a `Node` the op records a backward closure so
`backward` can run the exact reverse sweep of the recorded computation.
All numerics are float64.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_SEQ = itertools.count()


class Node:
    """One value in the recorded computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "seq")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)

    @property
    def shape(self):
        return np.shape(self.value)


def leaf(value: np.ndarray) -> Node:
    """Wrap an array as a differentiable graph input."""
    return Node(np.asarray(value, dtype=np.float64))


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _accum(node: Node, g) -> None:
    # first contribution keeps the incoming array by reference; later
    # contributions allocate a fresh sum, so no stored gradient is ever
    # mutated in place (incoming arrays may be shared between parents)
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Node) -> None:
    """Run the reverse sweep from a scalar loss node.

    Gradients accumulate into `.grad` of every reachable node; leaves keep
    theirs, interior nodes are visited exactly once in reverse creation
    order.
    """
    if np.ndim(loss.value) != 0:
        raise ValueError("backward requires a scalar loss")
    order = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        for p in node.parents:
            if isinstance(p, Node) and id(p) not in seen:
                stack.append(p)
    order.sort(key=lambda n: n.seq, reverse=True)
    loss.grad = np.float64(1.0)
    for node in order:
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def grad(loss_closure: Callable, params) -> "list[np.ndarray] | dict":
    """Exact reverse-mode gradients of a scalar-valued closure.

    `params` is a list or dict of numpy arrays; they are wrapped as graph
    leaves and passed to `loss_closure` in the same structure. Returns
    gradients in the matching structure (zeros where a parameter does not
    influence the loss).
    """
    if isinstance(params, dict):
        leaves = {k: leaf(v) for k, v in params.items()}
        out = loss_closure(leaves)
    else:
        leaves = [leaf(v) for v in params]
        out = loss_closure(leaves)
    if not isinstance(out, Node):
        # loss does not depend on any parameter
        if np.ndim(out) != 0:
            raise ValueError("loss closure must return a scalar")
        zero = lambda v: np.zeros_like(np.asarray(v, dtype=np.float64))
        if isinstance(params, dict):
            return {k: zero(v) for k, v in params.items()}
        return [zero(v) for v in params]
    backward(out)
    def take(lf):
        if lf.grad is None:
            return np.zeros_like(lf.value)
        return np.asarray(lf.grad, dtype=np.float64)
    if isinstance(params, dict):
        return {k: take(lf) for k, lf in leaves.items()}
    return [take(lf) for lf in leaves]


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not (is_node(a) or is_node(b)):
        return out
    node = Node(out, parents=(a, b))

    def bw(g):
        if is_node(a):
            _accum(a, _unbroadcast(g, np.shape(av)))
        if is_node(b):
            _accum(b, _unbroadcast(g, np.shape(bv)))

    node.backward_fn = bw
    return node


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not (is_node(a) or is_node(b)):
        return out
    node = Node(out, parents=(a, b))

    def bw(g):
        if is_node(a):
            _accum(a, _unbroadcast(g, np.shape(av)))
        if is_node(b):
            _accum(b, _unbroadcast(-g, np.shape(bv)))

    node.backward_fn = bw
    return node


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not (is_node(a) or is_node(b)):
        return out
    node = Node(out, parents=(a, b))

    def bw(g):
        if is_node(a):
            _accum(a, _unbroadcast(g * bv, np.shape(av)))
        if is_node(b):
            _accum(b, _unbroadcast(g * av, np.shape(bv)))

    node.backward_fn = bw
    return node


def scale(a, c: float):
    av = value_of(a)
    out = av * c
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, g * c)
    return node


def square(a):
    av = value_of(a)
    out = av * av
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, g * (2.0 * av))
    return node


def relu(a):
    av = value_of(a)
    out = np.maximum(av, 0.0)
    if not is_node(a):
        return out
    mask = av > 0.0
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, g * mask)
    return node


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, g * (1.0 - out * out))
    return node


def clip(a, lo: float, hi: float):
    """Elementwise clamp; zero gradient outside [lo, hi]."""
    av = value_of(a)
    out = np.clip(av, lo, hi)
    if not is_node(a):
        return out
    mask = (av > lo) & (av < hi)
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, g * mask)
    return node


def stopgrad(a):
    """Pass the value through, block the gradient."""
    return value_of(a)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not (is_node(a) or is_node(b)):
        return out
    node = Node(out, parents=(a, b))

    def bw(g):
        if is_node(a):
            _accum(a, g @ bv.T)
        if is_node(b):
            _accum(b, av.T @ g)

    node.backward_fn = bw
    return node


def linear(x, w, b):
    """Affine map on row-stacked samples: x @ w + b."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    out = xv @ wv + bv
    if not (is_node(x) or is_node(w) or is_node(b)):
        return out
    node = Node(out, parents=(x, w, b))

    def bw(g):
        if is_node(x):
            _accum(x, g @ wv.T)
        if is_node(w):
            _accum(w, xv.T @ g)
        if is_node(b):
            _accum(b, g.sum(axis=0))

    node.backward_fn = bw
    return node


def gram_rows(a, d: int):
    """Per-row Gram product: each row of `a` is a row-major (d, d) matrix G
    and the output row is G @ G.T flattened. Guarantees symmetric PSD rows."""
    av = value_of(a)
    n = av.shape[0]
    G = av.reshape(n, d, d)
    out = np.einsum("nij,nkj->nik", G, G).reshape(n, d * d)
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))

    def bw(g):
        U = g.reshape(n, d, d)
        dG = np.einsum("nij,njk->nik", U + U.transpose(0, 2, 1), G)
        _accum(a, dG.reshape(n, d * d))

    node.backward_fn = bw
    return node


def outer_rows(a, b):
    """Per-row outer product: rows (d,) x (d,) -> flattened (d*d,)."""
    av, bv = value_of(a), value_of(b)
    n, d = av.shape
    out = np.einsum("ni,nj->nij", av, bv).reshape(n, d * d)
    if not (is_node(a) or is_node(b)):
        return out
    node = Node(out, parents=(a, b))

    def bw(g):
        U = g.reshape(n, d, d)
        if is_node(a):
            _accum(a, np.einsum("nij,nj->ni", U, bv))
        if is_node(b):
            _accum(b, np.einsum("nij,ni->nj", U, av))

    node.backward_fn = bw
    return node


# ---------------------------------------------------------------------------
# shape / indexing ops

def concat_cols(parts: Sequence):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=1)
    if not any(is_node(p) for p in parts):
        return out
    node = Node(out, parents=tuple(parts))
    widths = [v.shape[1] for v in vals]

    def bw(g):
        off = 0
        for p, w in zip(parts, widths):
            if is_node(p):
                _accum(p, g[:, off:off + w])
            off += w

    node.backward_fn = bw
    return node


def slice_cols(a, start: int, stop: int):
    av = value_of(a)
    out = av[:, start:stop]
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))

    def bw(g):
        full = np.zeros_like(av)
        full[:, start:stop] = g
        _accum(a, full)

    node.backward_fn = bw
    return node


def gather_rows(a, idx: np.ndarray):
    av = value_of(a)
    out = av[idx]
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))

    def bw(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        _accum(a, full)

    node.backward_fn = bw
    return node


def scatter_rows(a, idx: np.ndarray, n_rows: int):
    """Place rows of `a` at positions `idx` of an (n_rows, ...) zero array."""
    av = value_of(a)
    out = np.zeros((n_rows,) + av.shape[1:], dtype=np.float64)
    out[idx] = av
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, g[idx])
    return node


# ---------------------------------------------------------------------------
# reductions

def l2norm_rows(a):
    """Per-row Euclidean norm (n, k) -> (n,). Subgradient 0 at the kink."""
    av = value_of(a)
    out = np.sqrt(np.sum(av * av, axis=1))
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))

    def bw(g):
        denom = np.where(out > 0.0, out, 1.0)
        _accum(a, (g / denom)[:, None] * av * (out > 0.0)[:, None])

    node.backward_fn = bw
    return node


def sum_cols_of_squares(a):
    """Per-row squared Euclidean norm (n, k) -> (n,)."""
    av = value_of(a)
    out = np.sum(av * av, axis=1)
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, g[:, None] * (2.0 * av))
    return node


def sum_all(a):
    av = value_of(a)
    out = np.float64(np.sum(av))
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, np.full(np.shape(av), g))
    return node


def mean_all(a):
    av = value_of(a)
    n = np.size(av)
    out = np.float64(np.mean(av))
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, np.full(np.shape(av), g / n))
    return node


def dot_const(a, c: np.ndarray):
    """Weighted sum with a constant vector: sum(a * c)."""
    av = value_of(a)
    out = np.float64(np.sum(av * c))
    if not is_node(a):
        return out
    node = Node(out, parents=(a,))
    node.backward_fn = lambda g: _accum(a, g * c)
    return node
