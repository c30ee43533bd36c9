"""Dense float64 tensors with a define-by-run gradient tape.

Every differentiable op appends one record to the active :class:`Tape` when any
operand requires a gradient. :func:`backward` walks the tape once in reverse
order and deposits gradients on the leaves.
"""

from __future__ import annotations

import base64
import contextlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    pass


class KinkError(ContractError):
    """An activation argument sat too close to a non-differentiable point."""


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass
class _Record:
    out: "Tensor"
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered list of executed ops; operands always precede their consumers."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.kink_distance = np.inf
        self.track_kinks = False
        self.generation = 0

    def record(self, out: "Tensor", parents, backward) -> None:
        out._tape = self
        out._generation = self.generation
        out._index = len(self.records)
        self.records.append(_Record(out, tuple(parents), backward))

    def note_kink(self, arg: np.ndarray, at: float = 0.0) -> None:
        if self.track_kinks and arg.size:
            self.kink_distance = min(self.kink_distance, float(np.min(np.abs(arg - at))))

    def reset(self) -> None:
        self.records = []
        self.kink_distance = np.inf
        self.generation += 1

    def __len__(self) -> int:
        return len(self.records)


_state = threading.local()


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def fresh_tape():
    """Run a block against a private tape (restores the previous one after)."""
    prev = getattr(_state, "tape", None)
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, op: str) -> None:
    # NaN and inf both survive a sum; overflow of a finite sum is reported too.
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total):
        raise NumericError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_generation", "_index")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape = None
        self._generation = -1
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        t._generation = -1
        t._index = -1
        return t

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
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


# Ops that map finite inputs to finite outputs skip the output scan.
_FINITE_PRESERVING = frozenset(
    {"neg", "relu", "leaky_relu", "elu", "abs", "tanh", "sigmoid", "reshape", "transpose",
     "getitem", "concat", "gather_rows"}
)


def _make(arr: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if op not in _FINITE_PRESERVING:
        _check_finite(arr, op)
    out = Tensor._wrap(arr)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().record(out, parents, backward)
    return out


# --------------------------------------------------------------------------
# Elementwise and broadcasting ops
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    if a.requires_grad:
        current_tape().note_kink(a.data)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    if a.requires_grad:
        current_tape().note_kink(a.data)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    expm = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, expm)
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, expm + alpha),), "elu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    if a.requires_grad:
        current_tape().note_kink(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "linear": lambda t: t,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "elu": elu,
}


def activation(kind: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# --------------------------------------------------------------------------
# Reductions and shape ops
# --------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), back, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) / float(count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(a.data[idx]), (a,), back, "getitem")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_rows(a, b)
    out = a.data @ b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def _matmul_rows(a: Tensor, b: Tensor) -> Tensor:
    """(..., k) @ (k, m) with the leading axes flattened into rows."""
    a2 = a.data.reshape(-1, a.shape[-1])
    out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def linear(x, w, b) -> Tensor:
    """x @ w + b over the last axis of ``x``; ``w`` is (k, m), ``b`` is (m,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear expects last dim {w.shape[0]}, got {x.shape[-1]}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    out += b.data
    out_shape = x.shape[:-1] + (w.shape[1],)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out.reshape(out_shape), (x, w, b), back, "linear")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back, "softmax")


# --------------------------------------------------------------------------
# Gather / scatter along the leading axis (edge-list message passing)
# --------------------------------------------------------------------------


def selection_matrix(index: np.ndarray, n: int) -> sp.csr_matrix:
    """Sparse E x n matrix with a single 1 per row at column ``index[e]``."""
    index = np.asarray(index, dtype=np.int64)
    e = index.shape[0]
    return sp.csr_matrix((np.ones(e), (np.arange(e), index)), shape=(e, n))


def _rows(arr: np.ndarray) -> np.ndarray:
    """2-D view with the leading axis kept; safe for zero-sized arrays."""
    return arr.reshape(arr.shape[0], int(np.prod(arr.shape[1:], dtype=np.int64)))


def gather_rows(a, sel: sp.csr_matrix) -> Tensor:
    """Rows of ``a`` picked by a selection matrix: out[e] = a[index[e]]."""
    a = as_tensor(a)
    if sel.shape[1] != a.shape[0]:
        raise ShapeError(f"gather over {sel.shape[1]} rows, tensor has {a.shape[0]}")
    flat = _rows(a.data)
    out = np.asarray(sel @ flat).reshape((sel.shape[0],) + a.shape[1:])
    selT = sel.T.tocsr()
    return _make(
        out,
        (a,),
        lambda g: (np.asarray(selT @ _rows(g)).reshape(a.shape),),
        "gather_rows",
    )


def segment_sum(a, sel: sp.csr_matrix) -> Tensor:
    """Sum rows of ``a`` into segments: out[i] = sum over e with index[e] == i."""
    a = as_tensor(a)
    if sel.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum over {sel.shape[0]} rows, tensor has {a.shape[0]}")
    selT = sel.T.tocsr()
    flat = _rows(a.data)
    out = np.asarray(selT @ flat).reshape((sel.shape[1],) + a.shape[1:])
    return _make(
        out,
        (a,),
        lambda g: (np.asarray(sel @ _rows(g)).reshape(a.shape),),
        "segment_sum",
    )


def segment_softmax(logits, sel: sp.csr_matrix) -> Tensor:
    """Softmax of per-edge logits within each receiver's segment."""
    logits = as_tensor(logits)
    flat = _rows(logits.data)
    n = sel.shape[1]
    index = sel.indices  # one entry per row, row order preserved by csr
    shift = np.full((n, flat.shape[1]), -np.inf)
    np.maximum.at(shift, index, flat)
    shift = shift[index].reshape(logits.shape)
    e = exp(logits - shift)
    denom = gather_rows(segment_sum(e, sel), sel)
    return e / denom


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that influences ``loss``; consumes the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._generation != tape.generation or loss._index >= len(tape.records):
        raise ContractError("loss was not produced on the active tape")
    if tape.records[loss._index].out is not loss:
        raise ContractError("loss was not produced on the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss._index + 1]):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = parent.grad + pg if parent.grad is not None else np.array(pg)
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    tape.reset()


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-5,
    kink_tol: float = 1e-3,
) -> float:
    """Max relative error between tape gradients and central differences.

    Raises :class:`KinkError` if any ReLU-like op saw an argument within
    ``kink_tol`` of its kink at the base point, since a finite difference there
    says nothing about the analytic derivative.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    with fresh_tape() as tape:
        tape.track_kinks = True
        xt = Tensor(base, requires_grad=True)
        out = f(xt)
        if tape.kink_distance < kink_tol:
            raise KinkError(f"activation argument {tape.kink_distance:.3g} from a kink")
        backward(out)
    analytic = xt.grad.ravel()

    def value(arr):
        with no_grad():
            v = f(Tensor._wrap(arr)).data
        if not np.isfinite(v).all():
            raise NumericError("non-finite value during gradcheck")
        return float(v)

    numeric = np.empty(base.size)
    flat = base.ravel()
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = value(base)
        flat[i] = orig - eps
        fm = value(base)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * eps)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale)) if base.size else 0.0


def gradcheck_params(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    kink_tol: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Like :func:`gradcheck` but for the leaves ``params`` of a closure ``f()``.

    With ``max_entries`` only that many randomly chosen scalar entries (over all
    parameters) are compared against central differences.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    with fresh_tape() as tape:
        tape.track_kinks = True
        out = f()
        if tape.kink_distance < kink_tol:
            raise KinkError(f"activation argument {tape.kink_distance:.3g} from a kink")
        backward(out)
    sites = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_entries is not None and len(sites) > max_entries:
        rng = rng or np.random.default_rng(0)
        sites = [sites[k] for k in rng.choice(len(sites), size=max_entries, replace=False)]
    worst = 0.0
    for i, j in sites:
        p = params[i]
        at = np.unravel_index(j, p.data.shape)
        orig = p.data[at]
        with no_grad():
            p.data[at] = orig + eps
            fp = float(f().data)
            p.data[at] = orig - eps
            fm = float(f().data)
        p.data[at] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite value during gradcheck")
        numeric = (fp - fm) / (2 * eps)
        analytic = float(p.grad.reshape(-1)[j]) if p.grad is not None else 0.0
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


# --------------------------------------------------------------------------
# Parameters, MLP, Adam
# --------------------------------------------------------------------------


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class MlpParams:
    layers: list[tuple[Tensor, Tensor]]
    activations: list[str]

    def __post_init__(self):
        if len(self.activations) != len(self.layers) - 1:
            raise ValueError("need one activation per hidden layer")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ShapeError(f"incompatible layers {w0.shape} -> {w1.shape}")

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1][0].shape[1]

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def named_parameters(self, prefix: str = "mlp") -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out += [(f"{prefix}.{i}.weight", w), (f"{prefix}.{i}.bias", b)]
        return out


def make_mlp(widths: Sequence[int], rng: np.random.Generator, activation: str = "relu") -> MlpParams:
    """MLP with the given layer widths; hidden layers share one activation kind."""
    if len(widths) < 2:
        raise ValueError("an MLP needs at least input and output widths")
    layers = [
        (init_uniform(rng, a, (a, b)), init_uniform(rng, a, (b,)))
        for a, b in zip(widths[:-1], widths[1:])
    ]
    return MlpParams(layers, [activation] * (len(widths) - 2))


def mlp_apply(p: MlpParams, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != p.d_in:
        raise ShapeError(f"MLP expects last dim {p.d_in}, got {x.shape[-1]}")
    h = x
    for i, (w, b) in enumerate(p.layers):
        h = linear(h, w, b)
        if i < len(p.activations):
            h = activation(p.activations[i])(h)
    return h


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], s: AdamState) -> AdamState:
    """One bias-corrected Adam update; parameters are rebound to new arrays."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not s.m:
        s.m = [np.zeros_like(p.data) for p in params]
        s.v = [np.zeros_like(p.data) for p in params]
    if len(s.m) != len(params):
        raise ContractError("Adam state was built for a different parameter list")
    s.t += 1
    c1 = 1.0 - s.beta1**s.t
    c2 = 1.0 - s.beta2**s.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != p.shape or s.m[i].shape != p.shape:
            raise ContractError(f"shape mismatch in Adam for parameter {i}: {p.shape} vs {g.shape}")
        s.m[i] = s.beta1 * s.m[i] + (1 - s.beta1) * g
        s.v[i] = s.beta2 * s.v[i] + (1 - s.beta2) * g * g
        update = s.lr * (s.m[i] / c1) / (np.sqrt(s.v[i] / c2) + s.epsilon)
        p.data = p.data - update
    return s


class Adam:
    """Convenience wrapper: zeroes grads, steps with :func:`adam_step`."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "gnnflavors-checkpoint/1"


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").reshape(shape).astype(DTYPE)


def save_checkpoint(named: Sequence[tuple[str, Tensor]], path: str | Path) -> None:
    """Write ``{"format", "tensors": [{"name", "shape", "data"}]}``.

    ``data`` is base64 of little-endian float64 values in row-major order.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "tensors": [
            {"name": name, "shape": list(t.shape), "data": _encode(t.data)} for name, t in named
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unrecognised checkpoint format {doc.get('format')!r}")
    return {e["name"]: _decode(e["data"], e["shape"]) for e in doc["tensors"]}


def restore(named: Sequence[tuple[str, Tensor]], values: dict[str, np.ndarray]) -> None:
    for name, t in named:
        if name not in values:
            raise ContractError(f"checkpoint lacks {name}")
        if values[name].shape != t.shape:
            raise ShapeError(f"{name}: checkpoint shape {values[name].shape} != {t.shape}")
        t.data = values[name].copy()
