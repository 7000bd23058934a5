"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (if any) when at least
one input requires a gradient.  Outside a tape everything runs as plain numpy,
which is what decoding and evaluation use.

    >>> x = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    >>> x.grad
    array([4.])
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "ContractError", "DeterminismError",
    "backward", "grad_check", "matmul", "activation", "tanh", "sigmoid",
    "softplus", "exp", "log", "sqrt", "softmax_xent", "concat", "vstack",
    "take_rows", "rows", "cols", "where_rows", "as_tensor",
]

_ids = itertools.count()
_local = threading.local()


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "tape_id", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.id = next(_ids)
        self.tape_id = None  # id() of the tape that recorded this tensor, if any

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)


def _raise_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward

    @property
    def input_ids(self):
        return [t.id for t in self.inputs]

    @property
    def output_id(self):
        return self.output.id


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so inputs always precede the node that
    consumes them.  Use as a context manager; tapes nest.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        backward(loss, self)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out_data, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    out.tape_id = id(tape)
    tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients add onto whatever ``.grad`` already holds.  The tape is left
    untouched, so a second call accumulates a second copy.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    produced = {node.output.id for node in tape.nodes}
    if loss.id not in produced and (not loss.requires_grad or loss.tape_id is not None):
        raise ContractError("loss is not on the tape")
    leaves: dict[int, Tensor] = {}
    if loss.id not in produced:
        leaves[loss.id] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
            if t.id not in produced:
                leaves[t.id] = t
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is None:
            continue
        g = np.reshape(g, t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _record(_softplus(xd), (x,), lambda g: (g * _sigmoid(xd),))


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = {"tanh": tanh, "sigmoid": sigmoid, "softplus": softplus}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _record(y, (x,), lambda g: (g * 0.5 / y,))


# ------------------------------------------------------------------ structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2:  # matrix @ vector
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return _record(ad @ bd, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.sum(a.data, axis=axis), (a,), back)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
                p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != ax):
            raise DimensionError(
                f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=ax), parts, back)


def vstack(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 blocks on top of each other."""
    return concat(parts, axis=0)


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice ``a[..., start:stop]``."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record(a.data[..., start:stop], (a,), back)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``a[start:stop]``."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record(a.data[start:stop], (a,), back)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows ``a[idx]``; repeated indices accumulate on the way back."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), back)


def where_rows(mask, new: Tensor, old: Tensor) -> Tensor:
    """Row-wise select: rows where ``mask`` is true come from ``new``."""
    m = np.asarray(mask, dtype=bool)
    if m.all():
        return new
    mcol = m.reshape((-1,) + (1,) * (new.ndim - 1))
    return _record(np.where(mcol, new.data, old.data), (new, old),
                   lambda g: (np.where(mcol, g, 0.0), np.where(mcol, 0.0, g)))


def softmax_xent(logits: Tensor, target) -> Tensor:
    """Negative log softmax probability of ``target``.

    For rank-1 logits ``target`` is one id and the result is a scalar; for
    rank-2 logits it is one id per row and the result has one loss per row.
    """
    z = logits.data
    tgt = np.asarray(target)
    vocab = z.shape[-1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexError(f"target id out of range for vocabulary of size {vocab}")
    if z.ndim == 1:
        if tgt.ndim != 0:
            raise DimensionError("rank-1 logits take a single target id")
        shifted = z - z.max()
        lse = np.log(np.exp(shifted).sum())
        loss = lse - shifted[int(tgt)]
        p = np.exp(shifted - lse)

        def back(g):
            d = p.copy()
            d[int(tgt)] -= 1.0
            return (g * d,)

        return _record(np.asarray(loss), (logits,), back)
    if z.ndim != 2 or tgt.shape != (z.shape[0],):
        raise DimensionError(f"softmax_xent: logits {z.shape} vs targets {tgt.shape}")
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = lse - shifted[rows, tgt]

    def back(g):
        d = np.exp(shifted - lse[:, None])
        d[rows, tgt] -= 1.0
        return (d * g[:, None],)

    return _record(loss, (logits,), back)


def log_softmax(v: np.ndarray) -> np.ndarray:
    """Plain numpy helper for inference paths."""
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------- grad check

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Largest relative gap between taped gradients and central differences.

    ``f`` takes no arguments and must read the current values of ``params``;
    any noise it uses has to be frozen.  ``max_entries`` samples a subset of
    coordinates (per tensor, uniformly) for large models.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    f0 = float(f().data)
    if float(f().data) != f0:
        raise DeterminismError("f returned different values on repeated calls")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)

    total = sum(p.data.size for p in params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and total > max_entries:
            k = max(1, int(round(max_entries * flat.size / total)))
            idx = rng.choice(flat.size, size=min(k, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            a = analytic[i]
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
