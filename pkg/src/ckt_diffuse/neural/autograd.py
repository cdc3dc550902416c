"""Minimal reverse-mode autodiff over numpy arrays.

Everything is float64 and eager: each op computes its forward value
immediately and records a closure that scatters the upstream gradient
to its inputs.  backward() walks the tape in reverse topological
order.  Only the handful of ops the denoisers need are provided;
there is no graph reuse, no in-place mutation and no broadcasting
cleverness beyond what numpy itself does (gradients of broadcast
operands are summed back down to the operand's shape).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Array node in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through the tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other: "Tensor | float") -> "Tensor":
        other = _wrap(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return self + (_wrap(other) * -1.0)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        other = _wrap(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data @ other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.data.shape))
        out._backward = bw
        return out

    # -- shape ops ----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), parents=(self,))

        def bw(g):
            self._accumulate(g.reshape(self.data.shape))
        out._backward = bw
        return out

    def transpose(self, axes: tuple) -> "Tensor":
        out = Tensor(np.transpose(self.data, axes), parents=(self,))
        inv = np.argsort(axes)

        def bw(g):
            self._accumulate(np.transpose(g, inv))
        out._backward = bw
        return out

    def broadcast_to(self, shape: tuple) -> "Tensor":
        out = Tensor(np.broadcast_to(self.data, shape).copy(),
                     parents=(self,))

        def bw(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
        out._backward = bw
        return out

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     parents=(self,))

        def bw(g):
            if axis is None:
                self._accumulate(np.full_like(self.data, g))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())
        out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else _axis_size(self.data, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- nonlinearities -----------------------------------------------

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), parents=(self,))

        def bw(g):
            self._accumulate(g * (self.data > 0.0))
        out._backward = bw
        return out

    def tanh(self) -> "Tensor":
        val = np.tanh(self.data)
        out = Tensor(val, parents=(self,))

        def bw(g):
            self._accumulate(g * (1.0 - val * val))
        out._backward = bw
        return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axis_size(arr: np.ndarray, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= arr.shape[ax]
    return n


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g back down to the pre-broadcast shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def concat(tensors: list, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), parents=tuple(tensors))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)
    out._backward = bw
    return out


# -- fused losses -----------------------------------------------------
#
# Each loss pairs a numerically stable forward with a closed-form
# gradient so the tape never sees exp/log of raw logits.


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    diff = pred.data - target
    out = Tensor(np.mean(diff * diff), parents=(pred,))

    def bw(g):
        pred._accumulate(g * 2.0 * diff / diff.size)
    out._backward = bw
    return out


def softmax_cross_entropy(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean cross-entropy over all leading axes; classes on the last axis."""
    onehot = np.asarray(onehot, dtype=np.float64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=-1, keepdims=True)
    rows = logits.data.size // logits.data.shape[-1]
    nll = -(onehot * (z - np.log(ez.sum(axis=-1, keepdims=True)))).sum(axis=-1)
    out = Tensor(nll.sum() / rows, parents=(logits,))

    def bw(g):
        logits._accumulate(g * (p - onehot) / rows)
    out._backward = bw
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy; caller picks the reduction."""
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    val = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(val, parents=(logits,))
    sig = 1.0 / (1.0 + np.exp(-x))

    def bw(g):
        logits._accumulate(g * (sig - t))
    out._backward = bw
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Plain numpy sigmoid for inference paths."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax for inference paths."""
    z = x - x.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)
