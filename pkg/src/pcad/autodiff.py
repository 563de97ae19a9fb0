"""Dense fp64 tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  :func:`backward` sorts
the recorded graph topologically (the :class:`Tape`) and sweeps it once in
reverse, summing gradients where a node feeds more than one consumer.

Linear row maps (gathers, permutations, segment means) are expressed as scipy
sparse matrices through :class:`RowMap`, which keeps the octree operators fast
without a dedicated kernel per operator.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError

__all__ = [
    "NumericError",
    "RowMap",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "binary_cross_entropy",
    "concat",
    "cross_entropy",
    "custom_op",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad_value",
    "rms_norm",
    "row_map",
    "sigmoid",
    "silu",
    "softmax",
    "softplus",
    "sum",
    "tanh",
    "tensor",
]


class NumericError(FloatingPointError):
    """Raised when a forward pass produces NaN or infinite values."""


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite values produced by {op}")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An fp64 array node in a differentiable computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(
    value: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a precomputed ``value`` as a graph node.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent, in order.
    """
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g: np.ndarray) -> None:
            grads = backward_fn(g)
            for p, pg in zip(parents, grads):
                if pg is not None and p.requires_grad:
                    p._accumulate(pg)

        out._backward = _bw
    return out


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def _broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcastable(a, b, "add")
    return custom_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcastable(a, b, "mul")
    return custom_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    value = _check_finite(a.data**exponent, "power")
    return custom_op(value, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return custom_op(
        a.data @ b.data,
        (a, b),
        lambda g: (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        ),
    )


def exp(a: Tensor) -> Tensor:
    value = _check_finite(np.exp(a.data), "exp")
    return custom_op(value, (a,), lambda g: (g * value,))


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        value = _check_finite(np.log(a.data), "log")
    return custom_op(value, (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    value = _sigmoid(a.data)
    return custom_op(value, (a,), lambda g: (g * value * (1.0 - value),))


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)
    return custom_op(value, (a,), lambda g: (g * (1.0 - value * value),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    value = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return custom_op(value, (a,), lambda g: (g * _sigmoid(x),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    value = a.data * s
    return custom_op(value, (a,), lambda g: (g * (s + value * (1.0 - s)),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    value = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (value * (g - (g * value).sum(axis=axis, keepdims=True)),)

    return custom_op(value, (a,), _bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    value = z - lse
    p = np.exp(value)
    return custom_op(value, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return custom_op(np.asarray(value), (a,), _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    value = a.data[index]
    basic = _is_basic_index(index)

    def _bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return custom_op(np.array(value), (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    value = np.concatenate([t.data for t in tensors], axis=axis)
    return custom_op(value, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


class RowMap:
    """A fixed linear map acting on the rows of a matrix.

    Wraps a sparse ``(n_out, n_in)`` matrix together with its transpose so
    that gathers, permutations, neighborhood stacking and segment means all
    share one differentiable primitive.
    """

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = sp.csr_matrix(matrix)
        self._transpose: sp.csr_matrix | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def transpose(self) -> sp.csr_matrix:
        if self._transpose is None:
            self._transpose = self.matrix.T.tocsr()
        return self._transpose

    @classmethod
    def gather(cls, index: np.ndarray, n_in: int) -> RowMap:
        """Row ``i`` of the output is row ``index[i]`` of the input; -1 gives zeros."""
        index = np.asarray(index, dtype=np.int64).ravel()
        valid = index >= 0
        rows = np.nonzero(valid)[0]
        m = sp.csr_matrix(
            (np.ones(len(rows)), (rows, index[valid])), shape=(len(index), n_in)
        )
        return cls(m)

    @classmethod
    def segment_mean(cls, segment: np.ndarray, n_segments: int) -> RowMap:
        segment = np.asarray(segment, dtype=np.int64)
        counts = np.bincount(segment, minlength=n_segments).astype(np.float64)
        w = 1.0 / counts[segment]
        m = sp.csr_matrix(
            (w, (segment, np.arange(len(segment)))), shape=(n_segments, len(segment))
        )
        return cls(m)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ x)


def row_map(a: Tensor, rmap: RowMap) -> Tensor:
    if a.shape[0] != rmap.shape[1]:
        raise ContractError(f"row map expects {rmap.shape[1]} rows, got {a.shape[0]}")
    flat = a.data.reshape(a.shape[0], -1)
    value = np.asarray(rmap.matrix @ flat).reshape((rmap.shape[0],) + a.shape[1:])

    def _bw(g):
        gf = g.reshape(g.shape[0], -1)
        return (np.asarray(rmap.transpose @ gf).reshape(a.shape),)

    return custom_op(value, (a,), _bw)


# ---------------------------------------------------------------------------
# composites and losses


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    ms = mean(mul(x, x), axis=-1, keepdims=True)
    return mul(mul(x, power(add(ms, eps), -0.5)), scale)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ContractError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise ContractError(f"targets must lie in [0, {k})")
    if n == 0:
        return custom_op(np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    value = -logp[rows, targets].mean()

    def _bw(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return custom_op(np.array(value), (logits,), _bw)


BCE_EPS = 1e-12


def binary_cross_entropy(scores: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with scores clamped to [eps, 1 - eps]."""
    t = np.asarray(targets, dtype=np.float64).reshape(scores.shape)
    s = np.clip(scores.data, BCE_EPS, 1.0 - BCE_EPS)
    n = max(s.size, 1)
    value = -(t * np.log(s) + (1.0 - t) * np.log(1.0 - s)).sum() / n
    inside = (scores.data > BCE_EPS) & (scores.data < 1.0 - BCE_EPS)

    def _bw(g):
        grad = (-(t / s) + (1.0 - t) / (1.0 - s)) / n
        return (np.where(inside, grad * g, 0.0),)

    return custom_op(np.array(value), (scores,), _bw)


# ---------------------------------------------------------------------------
# backward sweep


class Tape:
    """Reverse-topological record of the graph reachable from a scalar output."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self) -> None:
        root = self.output
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are dead once propagated; leaves keep theirs
                if node is not root:
                    node.grad = None


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf that requires grad. Returns the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    _check_finite(loss.data, "loss")
    tape = Tape(loss)
    tape.backward()
    return tape


def parameters_grad(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
