"""
Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 array. While a Tape is active, every primitive that
touches a tracked tensor (a trainable leaf, or the output of an earlier
recorded primitive) appends one record to the tape. Tape.backward replays the
records in exact reverse order. Without an active tape, primitives evaluate
eagerly and record nothing, which is how inference runs.

Broadcasting follows numpy: shapes are aligned on the right and dimensions of
size 1 stretch. Backward rules sum gradients over every stretched axis.
"""

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from contextvars import ContextVar, Token
from dataclasses import dataclass
from typing import Any, Union

import numpy as np

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
GELU_CUBIC = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "exp", "neg")
REDUCE_KINDS = ("sum", "mean")


class AutodiffError(Exception):
    """Raised when a tensor operation cannot be performed."""
    pass


class DimensionError(AutodiffError):
    """Raised when operand shapes are incompatible."""
    pass


class NonFiniteError(AutodiffError):
    """Raised when an operation produces NaN or Inf."""
    pass


class DivisionByZeroError(AutodiffError):
    """Raised on division by an exact zero (including zero-norm vectors)."""
    pass


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]
Axis = Union[int, Sequence[int], None]

_active_tape: ContextVar["Tape | None"] = ContextVar("neuralinterp_active_tape", default=None)


class Tensor:
    """
    Dense float64 array that can take part in a recorded computation.

    Attributes:
        data: Underlying numpy array (row-major, float64)
        requires_grad: True for trainable leaves
        name: Optional label, used in error messages
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "_node")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        copy: bool = True,
    ) -> None:
        array = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if not np.isfinite(array).all():
            label = f" '{name}'" if name else ""
            raise NonFiniteError(f"Tensor{label} contains non-finite values")
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def node_id(self) -> int | None:
        """Handle into the tape that produced this tensor, None for leaves and constants."""
        return self._node

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{flag}{label})"

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return index(self, key)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "mean", axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)


@dataclass(slots=True)
class _Record:
    """One recorded primitive."""
    op: str
    inputs: tuple[int | None, ...]
    output: int
    backward: BackwardFn


class Tape:
    """
    Define-by-run record of primitive operations.

    Usage:
        with Tape() as tape:
            loss = model_loss(...)
        grads = tape.backward(loss, params)

    One tape belongs to one forward/backward pass. The active tape is stored
    in a context variable, so separate threads can run separate tapes.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._leaf_nodes: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []
        self._next_node = 0
        self._token: Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self._records)

    @property
    def ops(self) -> list[str]:
        """Recorded primitive names, in recording order."""
        return [record.op for record in self._records]

    def _allocate(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def _node_of(self, tensor: Tensor) -> int | None:
        if tensor._tape is self:
            return tensor._node
        if tensor.requires_grad:
            key = id(tensor)
            node = self._leaf_nodes.get(key)
            if node is None:
                node = self._allocate()
                self._leaf_nodes[key] = node
                self._leaf_refs.append(tensor)
            return node
        return None

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward: BackwardFn,
    ) -> None:
        """Append a primitive if any of its inputs is tracked on this tape."""
        nodes = tuple(self._node_of(tensor) for tensor in inputs)
        if all(node is None for node in nodes):
            return
        output._tape = self
        output._node = self._allocate()
        self._records.append(_Record(op, nodes, output._node, backward))

    def backward(
        self,
        loss: Tensor,
        params: Mapping[str, Tensor],
    ) -> dict[str, np.ndarray]:
        """
        Propagate d(loss)/d(.) back to the given leaves.

        Args:
            loss: Scalar tensor recorded on this tape
            params: Named trainable leaves

        Returns:
            Gradient array per parameter name; leaves the loss never reached
            get a zero array.

        Raises:
            AutodiffError: If the loss is not a scalar or not on this tape
        """
        if loss.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if loss._tape is not self:
            raise AutodiffError("loss was not recorded on this tape")

        assert loss._node is not None
        grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for record in reversed(self._records):
            grad = grads.pop(record.output, None)
            if grad is None:
                continue
            input_grads = record.backward(grad)
            for node, input_grad in zip(record.inputs, input_grads, strict=True):
                if node is None or input_grad is None:
                    continue
                previous = grads.get(node)
                grads[node] = input_grad if previous is None else previous + input_grad

        result: dict[str, np.ndarray] = {}
        for name, tensor in params.items():
            node = self._leaf_nodes.get(id(tensor))
            grad = grads.get(node) if node is not None else None
            if grad is None:
                result[name] = np.zeros_like(tensor.data)
            else:
                result[name] = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
        return result


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward on the tape that recorded `loss`."""
    if loss._tape is None:
        raise AutodiffError("loss is not attached to any tape")
    return loss._tape.backward(loss, params)


def as_tensor(value: Any) -> Tensor:
    """Wrap scalars and arrays as constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data: Any, name: str | None = None) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def _emit(
    op: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: BackwardFn,
) -> Tensor:
    if not np.isfinite(data).all():
        shapes = ", ".join(str(list(t.shape)) for t in inputs)
        raise NonFiniteError(f"{op} produced non-finite values (input shapes {shapes})")
    out = Tensor(data, copy=False)
    tape = _active_tape.get()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _broadcast_shape(
    op: str, a_shape: tuple[int, ...], b_shape: tuple[int, ...]
) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a_shape, b_shape))
    except ValueError as e:
        raise DimensionError(
            f"{op}: shapes {list(a_shape)} and {list(b_shape)} are not broadcastable"
        ) from e


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    stretched = tuple(
        axis for axis, size in enumerate(shape)
        if size == 1 and grad.shape[axis] != 1
    )
    if stretched:
        grad = grad.sum(axis=stretched, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} is invalid for a tensor of rank {ndim}")
        normalized.append(ax % ndim)
    return tuple(sorted(set(normalized)))


# ============== Elementwise ==============

def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    a_shape, b_shape = a.shape, b.shape

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)

    return _emit("add", a.data + b.data, (a, b), backward_fn)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    a_shape, b_shape = a.shape, b.shape

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a_shape), _unbroadcast(-grad, b_shape)

    return _emit("sub", a.data - b.data, (a, b), backward_fn)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(grad * b_data, a_data.shape),
            _unbroadcast(grad * a_data, b_data.shape),
        )

    return _emit("mul", a_data * b_data, (a, b), backward_fn)


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DivisionByZeroError(f"div: divisor of shape {list(b.shape)} contains exact zeros")
    a_data, b_data = a.data, b.data
    out = a_data / b_data

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(grad / b_data, a_data.shape),
            _unbroadcast(-grad * out / b_data, b_data.shape),
        )

    return _emit("div", out, (a, b), backward_fn)


def exp(a: Any) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * out,)

    return _emit("exp", out, (a,), backward_fn)


def neg(a: Any) -> Tensor:
    a = as_tensor(a)

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (-grad,)

    return _emit("neg", -a.data, (a,), backward_fn)


def elementwise(a: Any, b: Any = None, kind: str = "add") -> Tensor:
    """
    Dispatch one of the elementwise primitives by name.

    Args:
        a: First operand
        b: Second operand (ignored for the unary kinds exp and neg)
        kind: One of add, sub, mul, div, exp, neg

    Returns:
        Result tensor

    Raises:
        AutodiffError: If the kind is unknown or a binary kind lacks `b`
    """
    if kind == "exp":
        return exp(a)
    if kind == "neg":
        return neg(a)
    if kind not in ELEMENTWISE_KINDS:
        raise AutodiffError(f"Unknown elementwise kind: {kind}")
    if b is None:
        raise AutodiffError(f"elementwise {kind} needs two operands")
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    return binary[kind](a, b)


# ============== Linear algebra and reductions ==============

def matmul(a: Any, b: Any) -> Tensor:
    """
    Matrix product with numpy batch broadcasting: [..., m, k] @ [..., k, n].

    Raises:
        DimensionError: On rank < 2 operands or mismatched inner dimensions
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}"
        )
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    a_data, b_data = a.data, b.data

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if b_data.ndim == 2 and a_data.ndim > 2:
            # shared weight matrix: fold the batch axes into one GEMM per operand
            k, n = b_data.shape
            flat_grad = grad.reshape(-1, n)
            grad_a = (flat_grad @ b_data.T).reshape(grad.shape[:-1] + (k,))
            grad_b = a_data.reshape(-1, k).T @ flat_grad
            return _unbroadcast(grad_a, a_data.shape), grad_b
        grad_a = grad @ np.swapaxes(b_data, -1, -2)
        grad_b = np.swapaxes(a_data, -1, -2) @ grad
        return _unbroadcast(grad_a, a_data.shape), _unbroadcast(grad_b, b_data.shape)

    return _emit("matmul", a_data @ b_data, (a, b), backward_fn)


def reduce(a: Any, kind: str = "sum", axis: Axis = None, keepdims: bool = False) -> Tensor:
    """
    Sum or mean over the given axes.

    Raises:
        DimensionError: If an axis is out of range
        AutodiffError: If the kind is unknown
    """
    a = as_tensor(a)
    if kind not in REDUCE_KINDS:
        raise AutodiffError(f"Unknown reduction kind: {kind}")
    axes = _normalize_axes(axis, a.ndim)
    in_shape = a.shape
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))
    count = 1
    for ax in axes:
        count *= in_shape[ax]

    out = a.data.sum(axis=axes, keepdims=keepdims)
    if kind == "mean":
        out = out / count

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        expanded = np.broadcast_to(grad.reshape(kept_shape), in_shape)
        if kind == "mean":
            return (expanded / count,)
        return (expanded,)

    return _emit(kind, np.asarray(out), (a,), backward_fn)


def softmax(a: Any, axis: int = -1) -> Tensor:
    """Max-shifted softmax along one axis."""
    a = as_tensor(a)
    (ax,) = _normalize_axes(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (out * (grad - (grad * out).sum(axis=ax, keepdims=True)),)

    return _emit("softmax", out, (a,), backward_fn)


def layer_norm(a: Any, gamma: Any, beta: Any) -> Tensor:
    """
    Normalize over the last axis with biased variance, then apply gamma/beta.

    Raises:
        DimensionError: If gamma/beta do not match the last-axis length
    """
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    width = a.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(
            f"layer_norm: gamma {list(gamma.shape)} / beta {list(beta.shape)} "
            f"do not match last axis of {list(a.shape)}"
        )
    x = a.data
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + LAYER_NORM_EPS)
    normed = centered * inv_std
    gamma_data = gamma.data

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        flat_grad = grad.reshape(-1, width)
        grad_gamma = (flat_grad * normed.reshape(-1, width)).sum(axis=0)
        grad_beta = flat_grad.sum(axis=0)
        grad_normed = grad * gamma_data
        grad_x = inv_std * (
            grad_normed
            - grad_normed.mean(axis=-1, keepdims=True)
            - normed * (grad_normed * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return _emit("layer_norm", gamma_data * normed + beta.data, (a, gamma, beta), backward_fn)


def gelu(a: Any) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _SQRT_2_OVER_PI * (
            1.0 + 3.0 * GELU_CUBIC * x * x
        )
        return (grad * slope,)

    return _emit("gelu", out, (a,), backward_fn)


def l2_normalize(a: Any) -> Tensor:
    """
    Scale every last-axis vector to unit Euclidean norm.

    Raises:
        DivisionByZeroError: If any vector has norm exactly zero
    """
    a = as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DivisionByZeroError("l2_normalize: cannot normalize a zero vector")
    out = a.data / norms

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return ((grad - out * (grad * out).sum(axis=-1, keepdims=True)) / norms,)

    return _emit("l2_normalize", out, (a,), backward_fn)


# ============== Shape manipulation ==============

def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {list(in_shape)} as {list(shape)}") from e

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(in_shape),)

    return _emit("reshape", out, (a,), backward_fn)


def transpose(a: Any, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    perm = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(perm) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {list(perm)} is not a permutation of rank {a.ndim}")
    inverse = tuple(int(i) for i in np.argsort(perm))

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.transpose(inverse),)

    return _emit("transpose", a.data.transpose(perm), (a,), backward_fn)


def broadcast_to(a: Any, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    target = tuple(shape)
    if _broadcast_shape("broadcast_to", a.shape, target) != target:
        raise DimensionError(f"broadcast_to: {list(a.shape)} cannot stretch to {list(target)}")
    in_shape = a.shape

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (_unbroadcast(grad, in_shape),)

    return _emit("broadcast_to", np.array(np.broadcast_to(a.data, target)), (a,), backward_fn)


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    (ax,) = _normalize_axes(axis, parts[0].ndim)
    try:
        out = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError as e:
        shapes = [list(p.shape) for p in parts]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {ax}") from e
    boundaries = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward_fn(grad: np.ndarray) -> list[np.ndarray]:
        return list(np.split(grad, boundaries, axis=ax))

    return _emit("concat", out, parts, backward_fn)


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("stack: nothing to stack")
    try:
        out = np.stack([p.data for p in parts], axis=axis)
    except ValueError as e:
        shapes = [list(p.shape) for p in parts]
        raise DimensionError(f"stack: shapes differ {shapes}") from e
    ax = axis % out.ndim

    def backward_fn(grad: np.ndarray) -> list[np.ndarray]:
        return [np.take(grad, i, axis=ax) for i in range(len(parts))]

    return _emit("stack", out, parts, backward_fn)


def index(a: Any, key: Any) -> Tensor:
    """Basic or integer-array indexing; the gradient is scattered with add.at."""
    a = as_tensor(a)
    try:
        out = np.array(a.data[key])
    except IndexError as e:
        raise DimensionError(f"index: {e}") from e
    in_shape = a.shape

    def backward_fn(grad: np.ndarray) -> tuple[np.ndarray]:
        scattered = np.zeros(in_shape)
        np.add.at(scattered, key, grad)
        return (scattered,)

    return _emit("index", out, (a,), backward_fn)
