"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a record to a global sequence as it runs; the
sequence number doubles as a topological order, so ``backward`` just replays
the reachable records newest-first.

Gradient semantics: ``backward`` writes fresh gradients into every leaf with
``requires_grad`` (it never accumulates into an existing ``.grad``) and then
releases the graph. Calling ``backward`` a second time on the same loss raises
``RuntimeError``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "exp",
    "concat",
    "stack",
    "mse_loss",
    "backward",
    "grad_check",
    "grad_check_params",
    "AdamState",
    "adam_step",
    "Adam",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_seq = itertools.count()
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class _Record:
    seq: int
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A float64 array that may participate in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".strip())
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._record: _Record | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out._released = False
    track = _recording() and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out._record = _Record(next(_seq), inputs, vjp) if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.values - b.values, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "multiply")
    av, bv = a.values, b.values

    def vjp(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(av * bv, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            if av.ndim > 2 and bv.ndim == 2:
                # fold the batch into rows: one GEMM instead of a batched one
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(av @ bv, (a, b), vjp)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    v = x.values
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), vjp)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.values)

    def vjp(g):
        return (g * (1.0 - t * t),)

    return _make(t, (x,), vjp)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.values)

    def vjp(g):
        return (g * e,)

    return _make(e, (x,), vjp)


def tsum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.values.sum(axis=axis)), (x,), vjp)


def tmean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.values.size

    def vjp(g):
        return (np.full(x.shape, float(g) / n),)

    return _make(np.asarray(x.values.mean()), (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(x.values.reshape(shape), (x,), vjp)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.values, axes), (x,), vjp)


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.values[index]), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, ts, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.values for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"stack: {err}") from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, vjp)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences; ``target`` is treated as data."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.values - target.values
    n = diff.size

    def vjp(g):
        return float(g) * 2.0 * diff / n, None

    return _make(np.asarray(np.mean(diff * diff)), (pred, target), vjp)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.values.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise RuntimeError("graph already released by a previous backward call")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")

    # gather the tape segment reachable from loss
    records: dict[int, Tensor] = {}
    leaves: dict[int, Tensor] = {}
    stack_ = [loss]
    seen = set()
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._record is None:
            if t.requires_grad:
                leaves[id(t)] = t
            continue
        records[id(t)] = t
        stack_.extend(t._record.inputs)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for t in sorted(records.values(), key=lambda r: r._record.seq, reverse=True):
        g = grads.pop(id(t), None)
        rec = t._record
        if g is not None:
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        t._record = None
        t._released = True

    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.values) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)


def grad_check(function: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``function`` maps a tensor to a scalar tensor.
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = function(x)
    backward(out)
    analytic = x.grad.reshape(-1)

    numeric = np.empty_like(analytic)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            fp = function(Tensor(x0)).item()
        flat[i] = orig - eps
        with no_grad():
            fm = function(Tensor(x0)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)
    return relative_error(analytic, numeric)


def grad_check_params(
    loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5, elementwise: bool = False
) -> dict[str, float]:
    """Per-parameter relative error of ``loss_fn``'s gradients against central differences.

    The default is normwise per tensor, ``max|a - n| / max(|a|, |n|)``, since
    entries far below the tensor's scale are dominated by difference roundoff.
    ``loss_fn`` closes over ``params``; their values are perturbed in place and
    restored afterwards.
    """
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        numeric = np.empty(p.values.size)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                fm = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite evaluation at {name}[{i}]")
            numeric[i] = (fp - fm) / (2.0 * eps)
        errors[name] = relative_error(analytic, numeric) if elementwise else normwise_error(analytic, numeric)
    return errors


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def normwise_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if not analytic.size:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


# --------------------------------------------------------------------------- ADAM


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, name: str = "param"):
    """One bias-corrected ADAM update. Returns ``(new_param, new_state)``; inputs untouched.

    An all-zero gradient leaves the parameter where it is (moments still decay
    and the step counter still advances), so frozen or disconnected weights
    never drift on stale momentum.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step: shape mismatch for {name}: param {param.shape}, grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    if np.any(grad):
        new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    else:
        new = param.copy()
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new, new_state


@dataclass
class Adam:
    """ADAM over a name -> Tensor mapping. Parameters are updated in place."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = AdamState.zeros_like(
                    p.values, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps
                )

    def step(self, names: Iterable[str] | None = None) -> None:
        for name in names if names is not None else self.params:
            p = self.params[name]
            grad = p.grad if p.grad is not None else np.zeros_like(p.values)
            p.values, self.states[name] = adam_step(p.values, grad, self.states[name], name)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
