"""Minimal reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D C-contiguous ``float64`` array (a row vector is 1 x n,
a scalar is 1 x 1). Operations build a graph of :class:`Parameter` nodes;
:func:`backward` orders the graph into a tape and replays it in reverse,
accumulating into the ``grad`` of every trainable leaf.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

DenseMatrix = np.ndarray


def as_dense(x) -> DenseMatrix:
    arr = np.array(x, dtype=np.float64, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


class Parameter:
    """A dense value with a same-shaped gradient slot."""

    __slots__ = ("value", "_grad", "trainable", "name", "_parents", "_backward", "_needs_grad")

    def __init__(self, value, trainable: bool = False, name: str | None = None):
        self.value = value if _is_dense(value) else as_dense(value)
        self._grad = None
        self.trainable = trainable
        self.name = name
        self._parents: tuple[Parameter, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._needs_grad = trainable

    @property
    def grad(self) -> np.ndarray:
        # allocated on first use; most intermediate nodes never need one
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        self._grad = g

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 value, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Parameter{label}(shape={self.shape}, trainable={self.trainable})"


def _is_dense(x) -> bool:
    return (
        isinstance(x, np.ndarray)
        and x.ndim == 2
        and x.dtype == np.float64
        and x.flags.c_contiguous
    )


def _lift(x) -> Parameter:
    return x if isinstance(x, Parameter) else Parameter(x)


def _node(value: np.ndarray, parents: Sequence[Parameter], backward) -> Parameter:
    out = Parameter.__new__(Parameter)
    out.value = value
    out._grad = None
    out.trainable = False
    out.name = None
    out._parents = ()
    out._backward = None
    out._needs_grad = False
    if any(p._needs_grad for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out._needs_grad = True
    return out


class Tape:
    """Topologically ordered record of the operations behind a scalar."""

    def __init__(self, loss: Parameter):
        order: list[Parameter] = []
        seen: set[int] = set()
        stack: list[tuple[Parameter, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node._needs_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.entries = [n for n in order if not n.is_leaf]

    def __len__(self):
        return len(self.entries)

    def replay(self, loss: Parameter) -> None:
        for node in self.entries:
            node._grad = np.zeros_like(node.value)
        loss._grad = np.ones_like(loss.value)
        for node in reversed(self.entries):
            node._backward(node._grad)


def backward(loss: Parameter) -> None:
    """Accumulate d(loss)/d(p) into ``p.grad`` for every trainable leaf p."""
    if loss.value.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.value.shape}")
    if not loss._needs_grad:
        return
    if loss.is_leaf:
        loss.grad += 1.0
        return
    Tape(loss).replay(loss)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def _accumulate(p: Parameter, g: np.ndarray) -> None:
    if p._needs_grad:
        p.grad += g


# -- primitives --------------------------------------------------------------


def matmul(a, b) -> Parameter:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _back(g):
        if a._needs_grad:
            a.grad += kernels.matmul(g, b.value.T)
        if b._needs_grad:
            b.grad += kernels.matmul(a.value.T, g)

    return _node(kernels.matmul(a.value, b.value), (a, b), _back)


def add(a, b) -> Parameter:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def _back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.value + b.value, (a, b), _back)


def sub(a, b) -> Parameter:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")

    def _back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.value - b.value, (a, b), _back)


def scale(a, c: float) -> Parameter:
    a = _lift(a)
    c = float(c)
    return _node(a.value * c, (a,), lambda g: _accumulate(a, g * c))


def transpose(a) -> Parameter:
    a = _lift(a)
    return _node(np.ascontiguousarray(a.value.T), (a,), lambda g: _accumulate(a, g.T))


def scale_cols(a, v) -> Parameter:
    """Multiply column j of ``a`` by ``v[0, j]`` (i.e. ``a @ diag(v)``)."""
    a, v = _lift(a), _lift(v)
    if v.shape != (1, a.shape[1]):
        raise DimensionError(f"scale_cols: row vector {v.shape} does not match {a.shape}")

    def _back(g):
        _accumulate(a, g * v.value)
        if v._needs_grad:
            v.grad += (g * a.value).sum(axis=0, keepdims=True)

    return _node(a.value * v.value, (a, v), _back)


def take_cols(a, idx) -> Parameter:
    """Gather the columns listed in ``idx``; gradient scatters back, others get none."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)

    def _back(g):
        if a._needs_grad:
            a.grad[:, idx] += g

    return _node(np.ascontiguousarray(a.value[:, idx]), (a,), _back)


def take_rows(a, idx) -> Parameter:
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)

    def _back(g):
        if a._needs_grad:
            a.grad[idx, :] += g

    return _node(np.ascontiguousarray(a.value[idx, :]), (a,), _back)


def tanh(a) -> Parameter:
    a = _lift(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def sum_all(a) -> Parameter:
    a = _lift(a)
    return _node(
        np.array([[a.value.sum()]]), (a,), lambda g: _accumulate(a, np.full_like(a.value, g[0, 0]))
    )


def frobenius_sq(a) -> Parameter:
    a = _lift(a)
    return _node(
        np.array([[np.sum(a.value * a.value)]]),
        (a,),
        lambda g: _accumulate(a, (2.0 * g[0, 0]) * a.value),
    )


def loss_mse(pred, target) -> Parameter:
    pred = _lift(pred)
    target = target.value if isinstance(target, Parameter) else as_dense(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss_mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.value - target
    n = diff.size
    return _node(
        np.array([[np.sum(diff * diff) / n]]),
        (pred,),
        lambda g: _accumulate(pred, (2.0 * g[0, 0] / n) * diff),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_softmax_ce(logits, labels) -> Parameter:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = _lift(logits)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise DimensionError(f"loss_softmax_ce: {labels.shape[0]} labels for {batch} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise IndexError(f"label {bad} out of range for {classes} classes")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(batch)
    loss = np.sum(lse - z[rows, labels]) / batch

    def _back(g):
        if logits._needs_grad:
            p = softmax(logits.value)
            p[rows, labels] -= 1.0
            logits.grad += (g[0, 0] / batch) * p

    return _node(np.array([[loss]]), (logits,), _back)
