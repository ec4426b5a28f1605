"""Dense float64 tensors with a reverse-mode gradient tape.

A :class:`Tape` records every kernel applied to tensors attached to it.
Tensors created without a tape (``Tensor(array)``) are plain immutable
values: kernels applied only to them record nothing, which is how inference
runs.  Typical training use::

    tape = Tape()
    w = tape.watch(weights)
    loss = F.mean(F.matmul(x, w))
    grads = tape.backward(loss)        # {node_id: ndarray}
    dw = grads[w.node]
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DistributionError,
    NumericalError,
    ShapeError,
)

LOG_EPS = 1e-12
LAYER_NORM_EPS = 1e-5

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{where})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of kernel applications.

    Node ids are positions in the append order, so reverse iteration is a
    valid topological order for the backward sweep.
    """

    def __init__(self):
        self._tags: list[str] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._backward: list[Backward | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._leaves: list[int] = []
        self._leaf_set: set[int] = set()
        self._consumed = False

    def __len__(self):
        return len(self._tags)

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register ``value`` as a differentiable leaf and return it."""
        self._check_open()
        data = value.data if isinstance(value, Tensor) else value
        node = self._append(name or "leaf", (), None, np.shape(data))
        self._leaves.append(node)
        self._leaf_set.add(node)
        return Tensor(np.array(data, dtype=np.float64), self, node)

    def watch_all(self, params) -> dict[str, Tensor]:
        return {k: self.watch(v, k) for k, v in params.items()}

    def reset(self):
        self.__init__()

    def _check_open(self):
        if self._consumed:
            raise ContractError("tape already consumed by backward(); call reset() first")

    def _append(self, tag, parents, backward, shape) -> int:
        self._tags.append(tag)
        self._parents.append(parents)
        self._backward.append(backward)
        self._shapes.append(tuple(shape))
        return len(self._tags) - 1

    def record(self, tag: str, inputs: Sequence, out: np.ndarray, backward: Backward) -> Tensor:
        self._check_open()
        parents = tuple(t.node if isinstance(t, Tensor) and t.tape is self else None for t in inputs)
        node = self._append(tag, parents, backward, out.shape)
        return Tensor(out, self, node)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every watched leaf.

        Leaves that do not influence the loss get zeros.  A tape can be
        swept once; a second call raises until :meth:`reset`.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self or loss.node is None:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._check_open()
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node: np.ones(self._shapes[loss.node])}
        for node in range(loss.node, -1, -1):
            fn = self._backward[node]
            g = grads.get(node)
            if fn is None or g is None:
                continue
            parent_grads = fn(g)
            for parent, pg in zip(self._parents[node], parent_grads):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
            if node not in self._leaf_set:
                del grads[node]
        return {leaf: grads.get(leaf, np.zeros(self._shapes[leaf])) for leaf in self._leaves}

    def gradients(self, loss: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Convenience wrapper returning gradients keyed by leaf name."""
        by_node = self.backward(loss)
        return {name: by_node[t.node] for name, t in leaves.items()}


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs) -> "Tape | None":
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _finite(tag, out):
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{tag} produced non-finite values")
    return out


def _make(tag, inputs, out, backward) -> Tensor:
    _finite(tag, out)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(tag, inputs, out, backward)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise kernels


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _make("sub", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _make(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make("relu", (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make("gelu", (x,), out, backward)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    x = as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape kernels


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _make("swapaxes", (x,), np.swapaxes(x.data, a, b), lambda g: (np.swapaxes(g, a, b),))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(x, -1, -2)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", xs, out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(table, ids, axis: int = 0) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward.

    Serves both embedding lookup and gathering location embeddings.
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if axis != 0:
        raise ContractError("take only supports axis 0")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"index out of range for table with {n} rows")
    out = table.data[ids]

    def backward(g):
        dt = np.zeros(table.shape)
        np.add.at(dt, ids, g)
        return (dt,)

    return _make("take", (table,), out, backward)


embedding = take


# ---------------------------------------------------------------------------
# reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", (x,), np.asarray(out), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", (a, b), out, backward)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", (x,), y, backward)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    v = x.data
    n = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        dxhat = g * gd
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _make("layer_norm", (x, gain, bias), out, backward)


def l2_normalize(x) -> Tensor:
    """Scale every row (last axis) to unit length; zero rows are rejected."""
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm embedding")
    y = x.data / norms

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _make("l2_normalize", (x,), y, backward)


def cosine_similarity_matrix(t, l) -> Tensor:
    """Pairwise cosine similarity between rows of ``t`` [N,d] and ``l`` [K,d]."""
    t, l = as_tensor(t), as_tensor(l)
    if t.ndim != 2 or l.ndim != 2 or t.shape[1] != l.shape[1]:
        raise ShapeError(f"cosine similarity needs [N,d] and [K,d], got {t.shape} and {l.shape}")
    return matmul(l2_normalize(t), transpose(l2_normalize(l)))


def cross_entropy(p, y, atol: float = 1e-6) -> Tensor:
    """Mean over rows of ``-sum(y * log(p + 1e-12))``.

    ``p`` holds probabilities and ``y`` target distributions; both must be
    normalized along the last axis.
    """
    p = as_tensor(p)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"cross_entropy shape mismatch: {p.shape} vs {y.shape}")
    if np.any(np.abs(p.data.sum(axis=-1) - 1.0) > atol):
        raise DistributionError("probability rows do not sum to 1")
    if np.any(np.abs(y.sum(axis=-1) - 1.0) > atol):
        raise DistributionError("target rows do not sum to 1")
    rows = p.data.size // p.shape[-1]
    shifted = p.data + LOG_EPS
    out = np.asarray(-(y * np.log(shifted)).sum() / rows)
    return _make("cross_entropy", (p,), out, lambda g: (-g * y / shifted / rows,))


def stack_scalars(xs: Iterable[Tensor]) -> Tensor:
    return concat([reshape(x, (1,)) for x in xs], axis=0)
