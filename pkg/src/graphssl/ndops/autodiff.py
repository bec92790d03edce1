"""Reverse-mode differentiation over dense float64 matrices.

Every operation returns a new :class:`DiffValue` that remembers its parents
together with a closure mapping the upstream gradient to each parent's
gradient. :meth:`DiffValue.backward` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{op}: produced NaN or Inf")
    return x


class DiffValue:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_op")

    def __init__(self, value, requires_grad: bool = False,
                 parents: Sequence[tuple["DiffValue", Callable]] = (), op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self._parents = tuple(parents)
        self._op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"DiffValue(op={self._op}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, upstream=None) -> None:
        if upstream is None:
            if self.value.size != 1:
                raise ShapeError(f"backward without upstream needs a scalar, got {self.shape}")
            upstream = np.ones_like(self.value)
        order = _topological(self)
        grads = {id(self): np.asarray(upstream, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, rule in node._parents:
                if not parent.requires_grad:
                    continue
                pg = rule(g)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological(root: DiffValue) -> list[DiffValue]:
    """Nodes reachable from ``root`` (requiring grad), root first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def param(value) -> DiffValue:
    return DiffValue(value, requires_grad=True)


def const(value) -> DiffValue:
    return value if isinstance(value, DiffValue) else DiffValue(value)


def _shape_err(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# --------------------------------------------------------------------------
# kernels

def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = const(a), const(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)
    out = _check_finite(a.value @ b.value, "matmul")
    av, bv = a.value, b.value
    return DiffValue(out, parents=[(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)], op="matmul")


def spmm(adj: sp.spmatrix, h: DiffValue) -> DiffValue:
    """Sparse constant times dense value."""
    h = const(h)
    if adj.shape[1] != h.shape[0]:
        raise _shape_err("spmm", adj.shape, h.shape)
    adj_t = adj.T.tocsr()
    out = np.asarray(adj @ h.value)
    return DiffValue(_check_finite(out, "spmm"), parents=[(h, lambda g: np.asarray(adj_t @ g))],
                     op="spmm")


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise _shape_err("add", a.shape, b.shape)
    return DiffValue(a.value + b.value, parents=[(a, lambda g: g), (b, lambda g: g)], op="add")


def sub_elem(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = const(a), const(b)
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)
    return DiffValue(a.value - b.value, parents=[(a, lambda g: g), (b, lambda g: -g)], op="sub")


def scale(a: DiffValue, c: float) -> DiffValue:
    a = const(a)
    c = float(c)
    return DiffValue(_check_finite(a.value * c, "scale"), parents=[(a, lambda g: g * c)], op="scale")


def add_bias(a: DiffValue, b: DiffValue) -> DiffValue:
    """Broadcast a length-F bias (shape (F,) or (1, F)) over the rows of ``a``."""
    a, b = const(a), const(b)
    if a.value.ndim != 2 or b.value.size != a.shape[1]:
        raise _shape_err("add_bias", a.shape, b.shape)
    bshape = b.shape
    return DiffValue(a.value + b.value.reshape(1, -1),
                     parents=[(a, lambda g: g), (b, lambda g: g.sum(axis=0).reshape(bshape))],
                     op="add_bias")


def relu(a: DiffValue) -> DiffValue:
    a = const(a)
    mask = a.value > 0
    return DiffValue(np.where(mask, a.value, 0.0), parents=[(a, lambda g: g * mask)], op="relu")


def abs_elem(a: DiffValue) -> DiffValue:
    a = const(a)
    sign = np.sign(a.value)
    return DiffValue(np.abs(a.value), parents=[(a, lambda g: g * sign)], op="abs")


def take_rows(a: DiffValue, idx) -> DiffValue:
    a = const(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return DiffValue(a.value[idx], parents=[(a, rule)], op="take_rows")


def dropout(x: DiffValue, rate: float, train: bool, rng: np.random.Generator | None) -> DiffValue:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = const(x)
    if not train or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    mult = keep / (1.0 - rate)
    return DiffValue(x.value * mult, parents=[(x, lambda g: g * mult)], op="dropout")


def sparse_dropout_matmul(x: sp.spmatrix, w: DiffValue, rate: float, train: bool,
                          rng: np.random.Generator | None) -> DiffValue:
    """``dropout(x) @ w`` for a constant sparse ``x``.

    Only stored entries are masked, which gives the same distribution as dense
    dropout since zeros stay zero.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    w = const(w)
    if x.shape[1] != w.shape[0]:
        raise _shape_err("matmul", x.shape, w.shape)
    x = x.tocsr()
    if train and rate > 0.0:
        keep = rng.random(x.nnz) >= rate
        x = sp.csr_matrix((x.data * keep / (1.0 - rate), x.indices, x.indptr), shape=x.shape)
    xt = x.T.tocsr()
    out = _check_finite(np.asarray(x @ w.value), "matmul")
    return DiffValue(out, parents=[(w, lambda g: np.asarray(xt @ g))], op="sparse_matmul")


def total(terms: Sequence[tuple[float, DiffValue]]) -> DiffValue:
    """Weighted sum of scalar values, ``sum(w * t)``."""
    vals = [(float(w), const(t)) for w, t in terms]
    out = sum(w * t.value for w, t in vals)
    return DiffValue(_check_finite(np.asarray(out), "total"),
                     parents=[(t, (lambda w: lambda g: g * w)(w)) for w, t in vals], op="total")


# --------------------------------------------------------------------------
# losses

def _rows(mask, n: int, op: str) -> np.ndarray:
    idx = np.asarray(mask, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ValueError(f"{op}: empty mask")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"{op}: mask index out of range")
    return idx


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits: DiffValue, labels, mask) -> DiffValue:
    """Mean negative log-likelihood over the rows in ``mask``."""
    logits = const(logits)
    idx = _rows(mask, logits.shape[0], "softmax_cross_entropy")
    y = np.asarray(labels, dtype=np.int64)[idx]
    k = logits.shape[1]
    if y.min() < 0 or y.max() >= k:
        raise ValueError("softmax_cross_entropy: label outside 0..K-1 on masked rows")
    logp = log_softmax(logits.value[idx])
    loss = -logp[np.arange(len(idx)), y].mean()
    shape = logits.shape

    def rule(g):
        d = np.exp(logp)
        d[np.arange(len(idx)), y] -= 1.0
        out = np.zeros(shape)
        np.add.at(out, idx, d * (float(g) / len(idx)))
        return out

    return DiffValue(np.asarray(loss), parents=[(logits, rule)], op="softmax_ce")


def mse(pred: DiffValue, target, mask=None) -> DiffValue:
    """Mean over masked rows of the squared L2 row difference."""
    pred = const(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target.reshape(-1, 1)
    if target.shape != pred.shape:
        raise _shape_err("mse", pred.shape, target.shape)
    idx = np.arange(pred.shape[0]) if mask is None else _rows(mask, pred.shape[0], "mse")
    if idx.size == 0:
        raise ValueError("mse: empty mask")
    diff = pred.value[idx] - target[idx]
    loss = np.sum(diff * diff) / len(idx)
    shape = pred.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, idx, diff * (2.0 * float(g) / len(idx)))
        return out

    return DiffValue(_check_finite(np.asarray(loss), "mse"), parents=[(pred, rule)], op="mse")


def bce_with_logits(logits: DiffValue, targets, weights=None) -> DiffValue:
    """Mean (optionally weighted) binary cross-entropy on raw logits."""
    logits = const(logits)
    z = logits.value.reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.shape != z.shape:
        raise _shape_err("bce_with_logits", logits.shape, np.shape(targets))
    if np.any((t != 0) & (t != 1)):
        raise ValueError("bce_with_logits: targets must be 0 or 1")
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    # log(1 + e^z) - t z, evaluated without overflow
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.sum(w * per) / len(z)
    shape = logits.shape

    def rule(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (w * (sig - t) * (float(g) / len(z))).reshape(shape)

    return DiffValue(np.asarray(loss), parents=[(logits, rule)], op="bce")
