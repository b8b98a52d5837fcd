"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap read-only numpy arrays. Operations executed inside an active
:class:`GradTape` are recorded when any input requires a gradient; calling
:meth:`GradTape.gradient` (or :func:`backward`) walks the record in reverse.

Broadcasting is deliberately narrow: the smaller operand's shape must be a
trailing suffix of the larger one (i.e. it is repeated along leading axes).
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_node_ids = itertools.count(1)
_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = np.float64
    return np.array(data, dtype=dtype, copy=True)


class Tensor:
    """Immutable n-dimensional real array.

    ``shape == ()`` denotes a scalar (one element). Zero-sized extents are
    rejected.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data, dtype)
        self._init(arr, requires_grad)

    def _init(self, arr: np.ndarray, requires_grad: bool) -> None:
        if arr.size == 0 or any(n < 1 for n in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t._init(arr, requires_grad)
        return t

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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


class Parameter:
    """A named trainable tensor plus its accumulated gradient."""

    def __init__(self, name: str, value, dtype=None):
        self.name = name
        self.value = Tensor(value, requires_grad=True, dtype=dtype)
        self.grad = np.zeros(self.value.shape, dtype=self.value.dtype)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def assign(self, array) -> None:
        array = np.asarray(array)
        if array.shape != self.shape:
            raise DimensionError(
                f"cannot assign shape {array.shape} to parameter {self.name!r} of shape {self.shape}"
            )
        self.value = Tensor(array, requires_grad=True, dtype=self.value.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.value.shape, dtype=self.value.dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class TapeEntry(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; a tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: tuple, output: Tensor, backward: BackwardFn) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward))
        self._produced.add(output.node_id)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(source) for each source; unused sources get zeros."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id not in self._produced:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
        for entry in reversed(self.entries):
            g = grads.get(entry.output.node_id)
            if g is None:
                continue
            for t, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        out = []
        for s in sources:
            g = grads.get(s.node_id)
            out.append(np.zeros(s.shape, dtype=s.dtype) if g is None else np.asarray(g).reshape(s.shape))
        return out


def current_tape() -> "GradTape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def backward(tape: GradTape, loss: Tensor, params: Sequence[Parameter]) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) into each ``Parameter.grad``.

    Returns the freshly computed gradients keyed by parameter name.
    """
    grads = tape.gradient(loss, [p.value for p in params])
    out = {}
    for p, g in zip(params, grads):
        p.grad = p.grad + g
        out[p.name] = g
    return out


def apply_op(op: str, out: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` as a Tensor and record it on the active tape if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(np.asarray(out), requires_grad=needs)
    if needs:
        tape.record(op, tuple(inputs), result, backward_fn)
    return result


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(f"{op}: shapes {a} and {b} are not broadcastable along leading axes")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def _binary_operands(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "add")
    return apply_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "sub")
    return apply_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "mul")
    return apply_op(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return apply_op("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return apply_op("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    return apply_op("relu", y, (a,), lambda g: (np.where(y > 0, g, 0),))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch one of add/sub/mul (binary) or tanh/sigmoid/relu (unary)."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} takes a single operand")
        return _UNARY[op](as_tensor(a))
    raise ContractError(f"unknown elementwise op {op!r}")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    k, n = b.shape[-2], b.shape[-1]

    def grad(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.ndim == 2:
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op("matmul", np.matmul(a.data, b.data), (a, b), grad)


def _normalize_axes(axes, ndim: int, op: str) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = [axes]
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"{op}: repeated axes {list(axes)}")
    return tuple(sorted(out))


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.ndim, "reduce_sum")

    def grad(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return apply_op("reduce_sum", a.data.sum(axis=axes), (a,), grad)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.ndim, "reduce_mean")
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def grad(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / count,)

    return apply_op("reduce_mean", a.data.mean(axis=axes), (a,), grad)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    for t in tensors:
        if not isinstance(t, Tensor):
            raise DimensionError(f"concat expects Tensors, got {type(t).__name__}")
    ndim = tensors[0].ndim
    if ndim == 0:
        raise DimensionError("cannot concatenate scalars")
    (axis,) = _normalize_axes(axis, ndim, "concat")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ off-axis")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    (axis,) = _normalize_axes(axis, a.ndim, "slice_axis")
    if not 0 <= start < stop <= a.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] invalid for extent {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def grad(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return apply_op("slice", a.data[index].copy(), (a,), grad)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of :func:`concat` given the extents of the pieces."""
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to extent {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_axis(a, start, start + n, axis))
        start += n
    return out


def reshape(a: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(n) for n in new_shape)
    if new_shape.count(-1) == 1:
        known = int(np.prod([n for n in new_shape if n != -1]))
        if known <= 0 or a.size % known:
            raise DimensionError(f"cannot reshape {a.shape} to {new_shape}")
        new_shape = tuple(a.size // known if n == -1 else n for n in new_shape)
    if any(n < 1 for n in new_shape) or int(np.prod(new_shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} ({a.size} elements) to {new_shape}")
    if new_shape == a.shape:
        return a
    return apply_op("reshape", a.data.reshape(new_shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor, start_axis: int) -> Tensor:
    """Collapse every axis from ``start_axis`` onward into one."""
    (start_axis,) = _normalize_axes(start_axis, a.ndim, "flatten")
    return reshape(a, a.shape[:start_axis] + (int(np.prod(a.shape[start_axis:])),))
