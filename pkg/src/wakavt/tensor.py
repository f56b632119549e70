"""Dense float64 tensors with taped reverse-mode gradients.

The graph is built eagerly: any operation touching a tensor that
requires gradients records a backward closure (a vjp), and
:func:`backward` replays the tape in reverse topological order.
Everything is float64 and row-major throughout; there is no dtype or
layout polymorphism to reason about.

:func:`finite_diff_grad` is the independent oracle used to cross-check
every analytic gradient. It never consults the tape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParameterStore",
    "ShapeMismatchError",
    "FullyMaskedRowError",
    "no_grad",
    "grad_enabled",
    "linear",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "concat",
    "reshape",
    "transpose",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout_apply",
    "embedding",
    "take_along_last",
    "tensor_sum",
    "tensor_mean",
    "backward",
    "finite_diff_grad",
    "finite_diff_grad_wrt",
    "relative_error",
    "global_grad_norm",
    "clip_gradients",
]


class ShapeMismatchError(ValueError):
    """Operand shapes violate an operation's contract."""


class FullyMaskedRowError(ValueError):
    """A softmax row was entirely -inf: some state admits no choice at all."""


_GRAD_STACK = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracle paths)."""
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


def grad_enabled() -> bool:
    return _GRAD_STACK[-1]


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    ``shape`` is the logical extent; ``values`` is the flat row-major
    payload view. ``grad``, when populated by :func:`backward`, always
    matches ``data``'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum gradient contributions back down to the operand's shape.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise algebra


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _node(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _node(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (-g,)

    return _node(-a.data, (a,), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _node(y, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # Stable in both tails.
    d = a.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _node(y, (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    y = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _node(y, (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)

    def vjp(g):
        return (g * y,)

    return _node(y, (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _node(data, (a,), vjp)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeMismatchError("transpose without axes needs ndim >= 2")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _node(data, (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def vjp(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _node(data, tuple(ts), vjp)


def _getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _node(data, (a,), vjp)


# ---------------------------------------------------------------------------
# contractions and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        data = a.data @ b.data

        def vjp(g):
            ga = g @ b.data.T if a.requires_grad else None
            if b.requires_grad:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = None
            return ga, gb

    elif a.shape[:-2] == b.shape[:-2]:
        data = a.data @ b.data

        def vjp(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    else:
        raise ShapeMismatchError(f"matmul leading dims must match exactly: {a.shape} @ {b.shape}")
    return _node(data, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) over the trailing axis; accepts 1-D x for convenience."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2:
        raise ShapeMismatchError(f"linear weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError(f"linear: x trailing dim {x.shape[-1]} != weight rows {w.shape[0]}")
    one_d = x.ndim == 1
    xx = reshape(x, (1, -1)) if one_d else x
    y = matmul(xx, w)
    if b is not None:
        y = add(y, _as_tensor(b))
    if one_d:
        y = reshape(y, (y.shape[-1],))
    return y


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy() if not keepdims else np.broadcast_to(g, shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _node(data, (a,), vjp)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg / count, shape).copy(),)

    return _node(data, (a,), vjp)


# ---------------------------------------------------------------------------
# normalization and probability ops


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax; -inf entries (additive masks) get probability 0.

    A row that is entirely -inf is a contradiction (no admissible
    choice) and raises :class:`FullyMaskedRowError` rather than
    producing NaNs.
    """
    x = _as_tensor(x)
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise FullyMaskedRowError("softmax row has every entry masked to -inf")
    e = np.exp(d - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / s

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _node(y, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise FullyMaskedRowError("log_softmax row has every entry masked to -inf")
    z = d - m
    e = np.exp(z)
    s = e.sum(axis=axis, keepdims=True)
    y = z - np.log(s)
    p = e / s

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then scale-shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data
    if gamma.shape != d.shape[-1:] or beta.shape != d.shape[-1:]:
        raise ShapeMismatchError(
            f"layer_norm scale/shift must be shape {d.shape[-1:]}, got {gamma.shape}/{beta.shape}"
        )
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    width = d.shape[-1]

    def vjp(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, width).sum(axis=0)
        gbeta = g.reshape(-1, width).sum(axis=0)
        return gx, ggamma, gbeta

    return _node(y, (x, gamma, beta), vjp)


def dropout_apply(x, rate: float, mode: str, rng) -> Tensor:
    """Inverted dropout: train-mode scales kept entries by 1/(1-rate).

    ``rng`` is the injected noise source (anything with ``.random(shape)``).
    Infer mode and rate 0 are the identity.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if mode == "infer" or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)

    def vjp(g):
        return (g * scale,)

    return _node(x.data * scale, (x,), vjp)


def embedding(table, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatchError(f"embedding table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")
    data = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(data, (table,), vjp)


def take_along_last(x, idx) -> Tensor:
    """out[...] = x[..., idx[...]]: one gathered entry per leading position."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeMismatchError(f"index shape {idx.shape} must equal {x.shape[:-1]}")
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, tuple(np.indices(idx.shape)) + (idx,), g)
        return (gx,)

    return _node(data, (x,), vjp)


# ---------------------------------------------------------------------------
# the tape


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
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
    return order  # parents precede children; root is last


def backward(loss: Tensor, store: Optional["ParameterStore"] = None) -> None:
    """Accumulate d(loss)/d(node) into .grad over the reachable graph.

    With ``store`` given, every parameter ends with a gradient array —
    zeros for parameters the loss never touched.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ShapeMismatchError("backward expects a scalar loss tensor")
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(_toposort(loss)):
            g = node.grad
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(pg)
                else:
                    p.grad += pg
    if store is not None:
        for _, t in store.items():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# the independent gradient oracle


def finite_diff_grad(f, x: Tensor, h: float = 1e-5, indices: Optional[Iterable[int]] = None):
    """Central-difference estimate of d f(x) / dx. Never reads the tape.

    f maps a Tensor to a scalar (Tensor or float); x is left unchanged.
    Returns a Tensor shaped like x, or, when ``indices`` (flat
    coordinates) is given, a 1-D array aligned with them.
    """
    base = x.data.copy()
    work = base.copy()

    def evaluate() -> float:
        with no_grad():
            r = f(Tensor(work))
        return r.item() if isinstance(r, Tensor) else float(r)

    if indices is None:
        flat = range(base.size)
        out = np.zeros(base.size)
    else:
        flat = list(indices)
        out = np.zeros(len(flat))
    for k, pos in enumerate(flat):
        orig = base.reshape(-1)[pos]
        work.reshape(-1)[pos] = orig + h
        fp = evaluate()
        work.reshape(-1)[pos] = orig - h
        fm = evaluate()
        work.reshape(-1)[pos] = orig
        out[k] = (fp - fm) / (2.0 * h)
    if indices is None:
        return Tensor(out.reshape(base.shape))
    return out


def finite_diff_grad_wrt(loss_fn, param: Tensor, h: float = 1e-5, indices: Optional[Iterable[int]] = None):
    """Finite differences of a zero-argument loss w.r.t. one live parameter.

    Temporarily rebinds ``param.data`` to the probed buffer so the loss
    function can be any closure over the model.
    """
    saved = param.data

    def f(t: Tensor):
        param.data = t.data
        try:
            return loss_fn()
        finally:
            param.data = saved

    return finite_diff_grad(f, Tensor(saved), h=h, indices=indices)


def relative_error(analytic, estimate, floor: float = 1e-3) -> float:
    """max_i |a-e| / max(|a|, |e|, floor).

    The floor keeps exact-zero gradients (masked coordinates) from
    dividing by zero; near zero the bound degrades gracefully into an
    absolute tolerance of floor * rtol.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    e = np.asarray(estimate, dtype=np.float64).reshape(-1)
    if a.shape != e.shape:
        raise ShapeMismatchError(f"relative_error operands differ: {a.shape} vs {e.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(e)), floor)
    return float(np.max(np.abs(a - e) / denom))


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named parameter map with gradient slots and partition labels.

    Partitions follow the model decomposition: ``theta`` (decoder side),
    ``phi_r`` (recognition side), ``phi_p`` (prior network), ``xi``
    (auxiliary bag-of-words predictors).
    """

    PARTITIONS = ("theta", "phi_r", "phi_p", "xi")

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._labels: dict[str, str] = {}

    def add(self, path: str, value, partition: str = "theta") -> Tensor:
        if path in self._params:
            raise ValueError(f"duplicate parameter path: {path}")
        if partition not in self.PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}, expected one of {self.PARTITIONS}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[path] = t
        self._labels[path] = partition
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list:
        return list(self._params)

    def items(self):
        return self._params.items()

    def partition(self, path: str) -> str:
        return self._labels[path]

    def partition_paths(self, partition: str) -> list:
        return [p for p, lab in self._labels.items() if lab == partition]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, path: str) -> np.ndarray:
        t = self._params[path]
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())


def global_grad_norm(store: ParameterStore) -> float:
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return float(np.sqrt(total))


def clip_gradients(store: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    norm = global_grad_norm(store)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, t in store.items():
            if t.grad is not None:
                t.grad *= scale
    return norm
