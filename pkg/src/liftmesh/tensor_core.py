"""
Dense float64 tensors and a minimal reverse-mode differentiation tape.

Every network stage in the package is written against the ``Tensor`` type
defined here. A ``Tensor`` wraps a read-only numpy array; when a ``Tape`` is
active (``with Tape() as tape:``) each operation whose inputs were recorded on
that tape appends a node carrying its vector-Jacobian product. ``backward``
walks the nodes in reverse and accumulates gradients.

Operations broadcast like numpy, which lets the same code run on a single
pose (J×D) and on a training batch (B×J×D).
"""

import contextvars
import logging
import math
from dataclasses import dataclass
from typing import (Callable, Dict, List, Mapping, Optional, Sequence, Tuple,
                    Union)

import numpy as np

from .exceptions import ContractViolation

logger = logging.getLogger(__name__)

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_ACTIVE_TAPE: "contextvars.ContextVar[Optional[Tape]]" = contextvars.ContextVar(
    "liftmesh_active_tape", default=None
)


class Tensor:
    """Immutable float64 array with an optional handle into a tape."""

    __slots__ = ("data", "tape_id", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, tape_id: Optional[int] = None, tape=None):
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.tape_id = tape_id
        self._tape = tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape_id: Optional[int] = None, tape=None) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out.data = arr
        out.tape_id = tape_id
        out._tape = tape
        return out

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    shape = dims

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single value, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut from any tape."""
        return Tensor._wrap(self.data)

    def reshape(self, *dims) -> "Tensor":
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        tag = f", tape_id={self.tape_id}" if self.tape_id is not None else ""
        return f"Tensor(dims={self.dims}{tag})"

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

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass
class TapeNode:
    """One recorded operation: kind, input handles and its VJP closure."""

    kind: str
    inputs: Tuple[Optional[int], ...]
    vjp: Optional[Vjp]
    dims: Tuple[int, ...]


class Tape:
    """
    Ordered record of operations for one training step.

    A tape is single-threaded and owned by whoever opened it; activation is
    scoped to the current context, so concurrent inference without a tape is
    unaffected.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watch(self, tensor: "Tensor") -> Tensor:
        """Register tensor values as a leaf and return the recorded handle."""
        node_id = self._append("leaf", (), None, tensor.dims)
        return Tensor._wrap(tensor.data, node_id, self)

    def watch_all(self, tensors: Mapping[str, Tensor]) -> Dict[str, Tensor]:
        return {name: self.watch(t) for name, t in tensors.items()}

    def grads_by_name(
        self, loss: Tensor, named: Mapping[str, Tensor]
    ) -> Dict[str, np.ndarray]:
        """Run backward and return gradients keyed by the given names."""
        grads = backward(self, loss)
        out = {}
        for name, t in named.items():
            g = grads.get(t.tape_id) if t._tape is self else None
            out[name] = g.numpy() if g is not None else np.zeros(t.dims)
        return out

    def _append(self, kind, inputs, vjp, dims) -> int:
        self.nodes.append(TapeNode(kind, tuple(inputs), vjp, tuple(dims)))
        return len(self.nodes) - 1


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def record(kind: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    """
    Wrap value as the output of an operation on inputs.

    The node is only recorded when a tape is active and at least one input
    lives on it; the VJP returns one gradient (or None) per input.
    """
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return Tensor._wrap(value)
    ids = tuple(t.tape_id if t._tape is tape else None for t in inputs)
    if all(i is None for i in ids):
        return Tensor._wrap(value)
    node_id = tape._append(kind, ids, vjp, np.shape(value))
    return Tensor._wrap(value, node_id, tape)


def backward(tape: Tape, loss: Tensor) -> Dict[int, Tensor]:
    """Reverse accumulation from a scalar loss; returns handle → gradient."""
    if loss.size != 1:
        raise ContractViolation(f"backward() needs a scalar loss, got dims {loss.dims}")
    if loss._tape is not tape or loss.tape_id is None:
        raise ContractViolation("loss was not recorded on this tape")

    grads: Dict[int, np.ndarray] = {loss.tape_id: np.ones(loss.dims)}
    for idx in range(loss.tape_id, -1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.vjp is None:
            continue
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if inp is None or ig is None:
                continue
            grads[inp] = grads[inp] + ig if inp in grads else ig

    tape.gradients = {i: Tensor._wrap(g) for i, g in grads.items()}
    return tape.gradients


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def zeros(dims) -> Tensor:
    return Tensor._wrap(np.zeros(dims))


def ones(dims) -> Tensor:
    return Tensor._wrap(np.ones(dims))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.dims), _unbroadcast(g, b.dims)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.dims), _unbroadcast(-g, b.dims)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.dims),
            _unbroadcast(g * a.data, b.dims),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return record(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.dims),
            _unbroadcast(-g * out / b.data, b.dims),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tensor_abs(a) -> Tensor:
    a = as_tensor(a)
    return record("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def gelu(x) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    x = as_tensor(x)
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + GELU_COEFF * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return record("gelu", out, (x,), vjp)


def dropout(x, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given."""
    x = as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.dims) >= rate) / (1.0 - rate)
    return record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# -- linear algebra and shape ops ------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs rank >= 2, got {a.dims} @ {b.dims}")
    if a.dims[-1] != b.dims[-2]:
        raise ContractViolation(f"matmul dimension mismatch: {a.dims} @ {b.dims}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ContractViolation(f"matmul batch mismatch: {a.dims} @ {b.dims} ({e})")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.dims), _unbroadcast(gb, b.dims)

    return record("matmul", out, (a, b), vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return record(
        "transpose",
        np.swapaxes(a.data, -1, -2),
        (a,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(
        "permute", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),)
    )


def reshape(a, dims: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(dims))
    except ValueError as e:
        raise ContractViolation(f"cannot reshape {a.dims} to {tuple(dims)} ({e})")
    return record("reshape", out, (a,), lambda g: (g.reshape(a.dims),))


def _expand_reduced(g: np.ndarray, dims, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, dims)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = sorted(ax % len(dims) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, dims)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return record(
        "sum",
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.dims, axis, keepdims),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size / max(np.size(out), 1)
    return record(
        "mean",
        out,
        (a,),
        lambda g: (_expand_reduced(g / count, a.dims, axis, keepdims),),
    )


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ContractViolation(f"concat mismatch: {[t.dims for t in tensors]} ({e})")
    sizes = [t.dims[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record("concat", out, tensors, lambda g: np.split(g, cuts, axis=axis))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ContractViolation(f"stack mismatch: {[t.dims for t in tensors]} ({e})")
    n = len(tensors)
    return record(
        "stack", out, tensors, lambda g: [np.take(g, i, axis=axis) for i in range(n)]
    )


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index list."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    size = a.dims[axis]
    if idx.size and (idx.min() < -size or idx.max() >= size):
        raise ContractViolation(f"take index out of range for axis of size {size}")

    def vjp(g):
        ga = np.zeros(a.dims)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return record("take", np.take(a.data, idx, axis=axis), (a,), vjp)


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(
        isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis
        for k in items
    )


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[key])

    def vjp(g):
        ga = np.zeros(a.dims)
        if _is_basic_index(key):
            ga[key] += g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return record("getitem", out, (a,), vjp)


# -- normalization ---------------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ContractViolation(f"softmax_rows needs rank >= 2, got {x.dims}")
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return record("softmax", out, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row to mean 0 / variance 1, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.dims[-1]
    if gain.dims != (width,) or bias.dims != (width,):
        raise ContractViolation(
            f"layer_norm gain/bias must have length {width}, got {gain.dims}, {bias.dims}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        dx = inv_std / width * (
            width * dxhat
            - np.sum(dxhat, axis=-1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
        )
        dgain = np.sum((g * xhat).reshape(-1, width), axis=0)
        dbias = np.sum(g.reshape(-1, width), axis=0)
        return dx, dgain, dbias

    return record("layer_norm", out, (x, gain, bias), vjp)


# -- verification ----------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x, step: Optional[float] = None
) -> float:
    """
    Max relative error between the tape gradient of f at x and central
    differences: |analytic − numeric| / max(1, |analytic|).
    """
    x = as_tensor(x).detach()
    base = x.numpy()
    if step is None:
        step = 1e-4 * max(1.0, float(np.max(np.abs(base))) if base.size else 1.0)
    if step <= 0:
        raise ContractViolation(f"finite difference step must be positive, got {step}")

    with Tape() as tape:
        watched = tape.watch(x)
        loss = f(watched)
        grads = backward(tape, loss)
    analytic = (
        grads[watched.tape_id].data.reshape(-1)
        if watched.tape_id in grads
        else np.zeros(base.size)
    )

    flat = base.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        f_plus = f(Tensor(plus.reshape(base.shape))).item()
        f_minus = f(Tensor(minus.reshape(base.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    if not flat.size:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    worst = float(np.max(err))
    logger.debug(f"finite_diff_check over {flat.size} components: max rel err {worst:.3e}")
    return worst
