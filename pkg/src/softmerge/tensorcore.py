"""Small dense tensor type with tape-based reverse-mode differentiation.

Everything is float64. A :class:`Tape` records every op whose inputs require a
gradient; :func:`backward` replays the tape in exact reverse recording order,
so gradient accumulation is deterministic. Ops recorded outside a ``with
Tape()`` block go to a per-thread default tape that is replaced after each
backward.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> backward(w.sum())
    >>> w.grad
    array([1., 1., 1.])
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "backward",
    "matmul",
    "add_bias",
    "relu",
    "flatten",
    "scale",
    "sigmoid",
    "clip",
    "exp",
    "log",
    "softmax_cross_entropy",
    "mse",
    "gradcheck",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "Tape":
    stack = getattr(_local, "stack", None)
    if stack:
        return stack[-1]
    # outside any context: one default tape per thread, replaced once consumed
    tape = getattr(_local, "default", None)
    if tape is None or tape.consumed:
        tape = _local.default = Tape()
    return tape


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager to make it the recording target for new ops on
    this thread. A tape can be differentiated once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn) -> int:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new one")
        self.nodes.append(_Node(out, tuple(parents), backward_fn))
        return len(self.nodes) - 1

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tracked = [p for p in parents if p.requires_grad]
    if not tracked:
        return out
    tapes = {id(p.tape): p.tape for p in tracked if p.tape is not None}
    if len(tapes) > 1:
        raise TapeError("inputs were recorded on different tapes")
    if tapes:
        tape = next(iter(tapes.values()))
    else:
        tape = _active_tape()
    out.requires_grad = True
    out.tape = tape
    out.node = tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _result(
        data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(data, (a, b), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def _logistic(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _logistic(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; subgradient is zero wherever the clamp is active."""
    inside = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# reductions and indexing -------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    return _result(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return _result(
        np.mean(a.data), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def take(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), bw)


# layers ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {a.shape} and {b.shape} are not compatible")
    return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))


def flatten(a: Tensor) -> Tensor:
    if a.data.ndim < 1:
        raise ShapeError(f"flatten: needs a batch axis, got shape {a.shape}")
    shape = a.shape
    return _result(
        a.data.reshape(shape[0], -1), (a,), lambda g: (g.reshape(shape),)
    )


def scale(a: Tensor, g: Tensor) -> Tensor:
    """Multiply ``a`` by the scalar tensor ``g``; the gradient reaches both."""
    g = _wrap(g)
    if g.size != 1:
        raise ShapeError(f"scale: gate must be a scalar, got shape {g.shape}")
    gv = g.data.reshape(())

    def bw(up):
        return up * gv, np.reshape(np.sum(up * a.data), g.shape)

    return _result(a.data * gv, (a, g), bw)


# losses ------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-softmax probability of the true class, averaged or summed over rows."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    if b and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1)
    rows = np.arange(b)
    per_row = np.log(sez) - z[rows, labels]
    loss = np.mean(per_row) if reduction == "mean" else np.sum(per_row)
    denom = b if reduction == "mean" else 1

    def bw(g):
        p = ez / sez[:, None]
        p[rows, labels] -= 1.0
        return (p * (g / denom),)

    return _result(loss, (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    target = _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = diff * (2.0 * g / n)
        return d, -d

    return _result(np.mean(diff * diff), (pred, target), bw)


# backward ----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate into existing ``.grad`` buffers, so callers zero
    them between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any requires-grad tensor")
    if loss.node is None:
        # loss is itself a leaf
        loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
        return
    tape = loss.tape
    if tape.consumed:
        raise TapeError("backward called twice on the same tape; re-record the forward")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for i in range(loss.node, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        pgrads = node.backward_fn(g)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad or pg is None:
                continue
            if p.node is not None and p.tape is tape:
                prev = grads.get(p.node)
                grads[p.node] = pg if prev is None else prev + pg
            elif p.node is None:
                pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
    tape.nodes.clear()


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` rebuilds the scalar loss from scratch each call. The error for each
    parameter is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
    """
    for p in params:
        p.grad = None
    backward(fn())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        num = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = fn().item()
            flat[k] = orig - eps
            fm = fn().item()
            flat[k] = orig
            nflat[k] = (fp - fm) / (2 * eps)
        denom = max(np.linalg.norm(a), np.linalg.norm(num))
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(a - num) / denom))
    for p in params:
        p.grad = None
    return worst
