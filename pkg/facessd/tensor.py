"""
Tensor: dense n-dimensional arrays with reverse-mode automatic differentiation.

Every differentiable operation records a TapeNode on its output when any input
requires a gradient. ``backward`` walks those nodes in reverse topological
order and accumulates exact analytic gradients into the leaves.

Tensors are single-thread objects while a forward/backward pass is running;
between passes their values may be handed to other threads as snapshots.
"""
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DomainError, NonFiniteError, SerializationError, ShapeError

Scalar = Union[int, float]

_default_dtype = np.dtype(np.float64)


def set_default_dtype(dtype) -> None:
    """Switch the precision used for new tensors (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported tensor dtype {dtype} (expected float32 or float64)")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Record nothing on the tape inside this block (per thread)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@dataclass(eq=False)
class TapeNode:
    """
    One recorded operation.

    ``backward(node, grad)`` returns one gradient (or None) per input, using
    whatever the forward pass stored in ``saved``.
    """
    op: str
    inputs: Tuple["Tensor", ...]
    backward: Callable[["TapeNode", np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: Dict[str, object] = field(default_factory=dict)


def _check_finite(values: np.ndarray, op: str, stage: str = "forward") -> None:
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NonFiniteError(
            f"{bad} non-finite value(s) in {stage} of {op!r} (shape {tuple(np.shape(values))})"
        )


class Tensor:
    """
    A numeric array that can take part in automatic differentiation.

    Attributes:
        data: the values, a numpy array of the configured precision
        requires_grad: whether gradients flow into this tensor
        grad: accumulated gradient (same shape as data) or None
        node: the TapeNode that produced this tensor, None for leaves
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        _check_finite(self.data, "tensor")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        op: str,
        inputs: Sequence["Tensor"],
        backward: Callable[[TapeNode, np.ndarray], Sequence[Optional[np.ndarray]]],
        **saved
    ) -> "Tensor":
        """Wrap the output of an operation and record it on the tape if needed."""
        data = np.asarray(data)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        out.node = TapeNode(op, tuple(inputs), backward, saved) if out.requires_grad else None
        return out

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def relu(self) -> "Tensor":
        return elementwise("relu", self)

    def sigmoid(self) -> "Tensor":
        return elementwise("sigmoid", self)

    def log(self) -> "Tensor":
        return elementwise("log", self)

    def square(self) -> "Tensor":
        return elementwise("square", self)

    def sqrt(self) -> "Tensor":
        return elementwise("sqrt", self)

    # -- reductions and reshaping ---------------------------------------------

    def sum(self) -> "Tensor":
        def _backward(node, grad):
            return (np.broadcast_to(grad, node.saved["shape"]).copy(),)

        return Tensor.from_op(np.asarray(np.sum(self.data)), "sum", (self,), _backward, shape=self.shape)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            values = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"cannot reshape {self.shape} to {shape}: {e}") from None

        def _backward(node, grad):
            return (grad.reshape(node.saved["shape"]),)

        return Tensor.from_op(values, "reshape", (self,), _backward, shape=self.shape)

    def take(self, indices, axis: int = 0) -> "Tensor":
        """Gather entries along one axis; repeated indices accumulate gradient."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        axis = axis % self.ndim
        if indices.size and (indices.min() < 0 or indices.max() >= self.shape[axis]):
            raise ShapeError(f"take indices out of range for axis {axis} of size {self.shape[axis]}")

        def _backward(node, grad):
            full = np.zeros(node.saved["shape"], dtype=grad.dtype)
            moved = np.moveaxis(full, node.saved["axis"], 0)
            np.add.at(moved, node.saved["indices"], np.moveaxis(grad, node.saved["axis"], 0))
            return (full,)

        return Tensor.from_op(
            np.take(self.data, indices, axis=axis), "take", (self,), _backward,
            shape=self.shape, axis=axis, indices=indices
        )


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # only scalar broadcasting exists, so a mismatch means a size-1 operand
    if grad.shape == shape:
        return grad
    return np.asarray(np.sum(grad)).reshape(shape)


def _binary_backward(node: TapeNode, grad: np.ndarray):
    a, b = node.inputs
    op = node.op
    if op == "add":
        ga, gb = grad, grad
    elif op == "sub":
        ga, gb = grad, -grad
    else:  # mul
        ga, gb = grad * b.data, grad * a.data
    return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)


def _unary_backward(node: TapeNode, grad: np.ndarray):
    (x,) = node.inputs
    op = node.op
    if op == "relu":
        return (grad * (x.data > 0),)
    if op == "sigmoid":
        s = node.saved["out"]
        return (grad * s * (1.0 - s),)
    if op == "log":
        return (grad / x.data,)
    if op == "square":
        return (grad * 2.0 * x.data,)
    # sqrt: the derivative at 0 is taken as 0 so that norms of zero vectors stay finite
    root = node.saved["out"]
    safe = np.where(root > 0, root, 1.0)
    return (np.where(root > 0, grad * 0.5 / safe, 0.0),)


BINARY_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
UNARY_OPS = ("relu", "sigmoid", "log", "square", "sqrt")


def elementwise(op: str, a, b=None) -> Tensor:
    """
    Apply an elementwise operation.

    Binary ops (add, sub, mul) need equal shapes unless one operand holds a
    single element. Unary ops: relu, sigmoid, log, square, sqrt.

    Raises:
        ShapeError: for mismatched binary operands
        DomainError: for log of a non-positive value or sqrt of a negative one
    """
    if op in BINARY_OPS:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        a, b = _as_tensor(a), _as_tensor(b)
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return Tensor.from_op(BINARY_OPS[op](a.data, b.data), op, (a, b), _binary_backward)

    if op not in UNARY_OPS:
        raise ConfigError(f"unknown elementwise op {op!r}")
    if b is not None:
        raise ShapeError(f"{op} takes a single operand")

    x = _as_tensor(a)
    saved = {}
    if op == "relu":
        out = np.maximum(x.data, 0.0)
    elif op == "sigmoid":
        # tanh form avoids overflow in exp for large |x|
        out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        saved["out"] = out
    elif op == "log":
        if np.any(x.data <= 0):
            raise DomainError("log of a non-positive value")
        out = np.log(x.data)
    elif op == "square":
        out = np.square(x.data)
    else:
        if np.any(x.data < 0):
            raise DomainError("sqrt of a negative value")
        out = np.sqrt(x.data)
        saved["out"] = out
    return Tensor.from_op(out, op, (x,), _unary_backward, **saved)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        values = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in tensors]

    def _backward(node, grad):
        splits = np.cumsum(node.saved["sizes"])[:-1]
        return tuple(np.split(grad, splits, axis=node.saved["axis"]))

    return Tensor.from_op(values, "concat", tuple(tensors), _backward, sizes=sizes, axis=axis)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires it.

    Calling twice without resetting grads accumulates twice.

    Raises:
        ShapeError: if loss is not a single value
        NonFiniteError: if a gradient becomes NaN/Inf
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(_topological_order(loss)):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue

        if tensor.node is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue

        input_grads = tensor.node.backward(tensor.node, grad)
        for parent, parent_grad in zip(tensor.node.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            _check_finite(parent_grad, tensor.node.op, "backward")
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


# -- factories -----------------------------------------------------------------

def _validate_shape(shape) -> Tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_validate_shape(shape)), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_validate_shape(shape), float(value)), requires_grad=requires_grad)


INIT_SCHEMES = ("xavier_uniform",)


def fan_in_out(shape: Tuple[int, ...]) -> Tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def random_init(shape, seed: int, scheme: str = "xavier_uniform", requires_grad: bool = False) -> Tensor:
    """
    Deterministic variance-preserving init: U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    """
    shape = _validate_shape(shape)
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    fan_in, fan_out = fan_in_out(shape)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad)


def subsample_weight_tensor(w: Union[Tensor, np.ndarray], factors: Sequence[int]) -> Tensor:
    """
    Uniformly subsample a rank-4 weight tensor, keeping indices 0, f, 2f, ... per mode.

    A (4096, 512, 7, 7) tensor with factors (4, 1, 3, 3) becomes (1024, 512, 3, 3).
    """
    values = w.data if isinstance(w, Tensor) else np.asarray(w)
    if values.ndim != 4:
        raise ShapeError(f"subsampling needs a rank-4 tensor, got rank {values.ndim}")
    factors = tuple(int(f) for f in factors)
    if len(factors) != 4:
        raise ShapeError(f"need 4 factors, got {len(factors)}")
    if any(f < 1 for f in factors):
        raise DomainError(f"subsampling factors must be >= 1, got {factors}")
    f0, f1, f2, f3 = factors
    return Tensor(values[::f0, ::f1, ::f2, ::f3].copy())


# -- binary serialization --------------------------------------------------------

TENSOR_MAGIC = b"FSSD"
TENSOR_FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_HEADER = struct.Struct("<4sII")


def encode_tensor(value: Union[Tensor, np.ndarray]) -> bytes:
    """
    Encode as little-endian: magic "FSSD", version u32, rank u32, dims u32[rank],
    dtype tag u8 (0=f32, 1=f64), raw values.
    """
    array = value.data if isinstance(value, Tensor) else np.asarray(value)
    tag = _TAG_FOR_DTYPE.get(np.dtype(array.dtype.type))
    if tag is None:
        raise SerializationError(f"cannot serialize dtype {array.dtype}")
    shape = array.shape if array.ndim else (1,)
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_FORMAT_VERSION, len(shape))
    dims = struct.pack(f"<{len(shape)}I", *shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes()
    return header + dims + struct.pack("<B", tag) + payload


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    chunk = fh.read(count)
    if len(chunk) != count:
        raise SerializationError(f"truncated tensor data while reading {what}")
    return chunk


def read_tensor(fh: BinaryIO) -> np.ndarray:
    """Read one encoded tensor from a binary stream."""
    magic, version, rank = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
    if magic != TENSOR_MAGIC:
        raise SerializationError(f"bad tensor magic {magic!r}")
    if version != TENSOR_FORMAT_VERSION:
        raise SerializationError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
    (tag,) = struct.unpack("<B", _read_exact(fh, 1, "dtype tag"))
    if tag not in DTYPE_TAGS:
        raise SerializationError(f"unknown dtype tag {tag}")
    dtype = DTYPE_TAGS[tag]
    count = int(np.prod(dims))
    raw = _read_exact(fh, count * dtype.itemsize, "values")
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(dims)


def write_tensor(fh: BinaryIO, value: Union[Tensor, np.ndarray]) -> None:
    fh.write(encode_tensor(value))
