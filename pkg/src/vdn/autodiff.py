"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`.  Operations
are recorded define-by-run: each result that depends on a tensor with
``requires_grad`` carries a reference to its inputs, a backward rule and a
monotonically increasing sequence number.  The sequence numbers form the
tape; :func:`backward` walks the reachable part of it in reverse recording
order, visiting each operation exactly once.

Broadcasting is deliberately narrow.  Binary elementwise ops accept equal
shapes, a size-one scalar operand, or an operand whose shape is a trailing
suffix of the other's (a bias ``(h,)`` against a batch ``(n, h)``).  Anything
else needs an explicit :func:`broadcast_to` or :func:`reshape`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

_seq_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    __array_priority__ = 100.0  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``data`` as an op result; ``rule(g)`` returns one gradient per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = False
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                track = True
                break
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = rule
        out._seq = next(_seq_counter)
    else:
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


def custom_op(data, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Public hook for ops defined outside this module (same contract as built-ins)."""
    return _record(np.asarray(data, dtype=np.float64), parents, rule)


# -- broadcasting helpers ------------------------------------------------------

def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0 or a == (1,):
        return b
    if len(b) == 0 or b == (1,):
        return a
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(op, a, b)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or shape == (1,):
        return np.asarray(grad.sum()).reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _binary(op: str, a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(op, a.shape, b.shape)
    out = fwd(a.data, b.data)

    def rule(g):
        ga = _reduce_to(da(g, a.data, b.data, out), a.shape) if a.requires_grad else None
        gb = _reduce_to(db(g, a.data, b.data, out), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(
        "mul", a, b, np.multiply,
        lambda g, x, y, o: g * y,
        lambda g, x, y, o: g * x,
    )


def div(a, b) -> Tensor:
    b_t = as_tensor(b)
    if np.any(b_t.data == 0):
        raise DomainError("div: division by zero")
    return _binary(
        "div", a, b_t, np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * x / (y * y),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]

    def rule(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(a.shape) if a.requires_grad else None
        gb = (a2.T @ g2).reshape(b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def affine(x, w, b) -> Tensor:
    """x @ w + b for a batch ``x`` (n, i), weights (i, o) and bias (o,), as one tape node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[1] != w.shape[0]:
        raise ShapeError("affine", x.shape, w.shape)
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def rule(g):
        return (
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _record(out, (x, w, b), rule)


# -- unary elementwise -----------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.6g})")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _record(a.data * scale, (a,), lambda g: (g * scale,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record(out, (a,), lambda g: (g * sig,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sign,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions and shape ops -------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ContractError("mean over an empty axis")
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    lead = len(shape) - a.ndim
    stretched = tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
    )

    def rule(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if stretched:
            g = g.sum(axis=tuple(ax - lead for ax in stretched), keepdims=True)
        return (g.reshape(a.shape),)

    return _record(out, (a,), rule)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record(out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError("concat", ts[0].shape, t.shape)
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def rule(g):
        grads = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(int(lo), int(hi))
                grads.append(g[tuple(idx)].copy())
            else:
                grads.append(None)
        return tuple(grads)

    return _record(out, ts, rule)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise ContractError("index with ints, slices or integer arrays, not Tensors")
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, ()) from exc

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out, dtype=np.float64), (a,), rule)


def max_(a, axis: int = -1) -> Tensor:
    """Maximum over one axis; ties send the gradient to the first maximiser."""
    a = as_tensor(a)
    ax = axis % a.ndim
    arg = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def rule(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _record(out, (a,), rule)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax(logits) against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    n, c = logits.shape
    if n == 0:
        raise ContractError("softmax_cross_entropy on an empty batch")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must be integers in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    probs = np.exp(z - lse[:, None])

    def rule(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _record(np.asarray(loss), (logits,), rule)


# -- backward --------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("backward() on a tensor that does not require grad")

    # every tracked node reachable from the loss; op results carry increasing _seq,
    # leaves carry -1, so a descending sort is a valid reverse topological order
    seen = {id(loss)}
    order = [loss]
    stack = [loss]
    while stack:
        for p in stack.pop()._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                order.append(p)
                stack.append(p)
    order.sort(key=_seq_of, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


def _seq_of(t: Tensor) -> int:
    return t._seq


# -- gradient checking ----------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if h <= 0:
        raise ContractError("finite_diff_check: step must be positive")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("finite_diff_check: non-finite function value")
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2.0 * h)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError("finite_diff_check: non-finite gradient")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def finite_diff_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Gradient check of a closure w.r.t. parameter tensors, perturbed in place.

    ``coords_per_param`` limits the check to a random subset of coordinates per
    tensor, which keeps whole-model checks affordable.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            idx = rng.choice(flat.size, size=coords_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            if not (np.isfinite(num) and np.isfinite(a)):
                raise NumericError("finite_diff_check_params: non-finite gradient")
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
