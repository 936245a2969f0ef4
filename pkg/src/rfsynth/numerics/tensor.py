"""Small reverse-mode autodiff tensor over float64 numpy arrays.

Only the op set the training loop needs is provided: matmul, elementwise
arithmetic with broadcasting, relu, indexing, reductions, row norms and the
fused softmax losses.  Graphs are tiny, so backward() does a plain
topological sort every call.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Iterable["Tensor"], backward) -> "Tensor":
        parents = tuple(p for p in parents if p.requires_grad)
        out = cls(data, requires_grad=bool(parents))
        if parents:
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    # autodiff -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("implicit gradient only for scalar outputs")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): _as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def backward(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), lambda g: ((a, -g),))

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def backward(g):
            return (
                (a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)),
            )

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return self * (1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return ((a, full),)

        return Tensor._make(a.data[index], (a,), backward)

    # shape / reductions ---------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(a.shape)),))

    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: ((a, g.T),))

    def sum(self, axis=None) -> "Tensor":
        a = self

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, a.shape).copy()),)

        return Tensor._make(np.asarray(a.data.sum(axis=axis)), (a,), backward)

    def mean(self, axis=None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    def relu(self) -> "Tensor":
        return relu(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return Tensor._make(a.data @ b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to the non-finite loss guard
    return Tensor._make(np.maximum(x.data, 0.0), (x,), lambda g: ((x, g * mask),))


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of every row; the gradient at a zero row is taken as 0."""
    norms = np.sqrt(np.sum(x.data * x.data, axis=1))

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, g / safe, 0.0)
        return ((x, x.data * scale[:, None]),)

    return Tensor._make(norms, (x,), backward)


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_array(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_array(logits))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels or a
    (B, C) matrix of target probabilities."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-d, got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != n:
            raise DimensionError(f"{targets.shape[0]} labels for {n} rows")
        if not np.issubdtype(targets.dtype, np.integer):
            raise LabelError("integer labels expected")
        if n and (targets.min() < 0 or targets.max() >= c):
            raise LabelError(f"label outside [0, {c})")
        probs_target = np.zeros((n, c))
        probs_target[np.arange(n), targets] = 1.0
    else:
        if targets.shape != logits.shape:
            raise DimensionError(f"target shape {targets.shape} != logits {logits.shape}")
        probs_target = targets.astype(np.float64)
    logp = log_softmax_array(logits.data)
    loss = -np.sum(probs_target * logp) / n

    def backward(g):
        p = np.exp(logp)
        row_mass = probs_target.sum(axis=1, keepdims=True)
        return ((logits, g * (p * row_mass - probs_target) / n),)

    return Tensor._make(np.asarray(loss), (logits,), backward)


def kl_divergence(p_logits: Tensor, q_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Batch mean of KL(softmax(p) || softmax(q)); ``p_logits`` is the left
    argument.  Both sides receive gradients if they track them."""
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"KL operands differ: {p_logits.shape} vs {q_logits.shape}")
    n = p_logits.shape[0]
    logp = log_softmax_array(p_logits.data / temperature)
    logq = log_softmax_array(q_logits.data / temperature)
    p = np.exp(logp)
    diff = logp - logq
    row_kl = np.sum(p * diff, axis=1)
    loss = row_kl.sum() / n

    def backward(g):
        # d/dz_p: p * (diff - KL_row);  d/dz_q: q - p
        gp = p * (diff - row_kl[:, None])
        gq = np.exp(logq) - p
        scale = g / (n * temperature)
        return ((p_logits, scale * gp), (q_logits, scale * gq))

    return Tensor._make(np.asarray(loss), (p_logits, q_logits), backward)
