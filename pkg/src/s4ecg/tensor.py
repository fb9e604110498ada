"""Dense tensors with reverse-mode automatic differentiation.

Every operation on a `Tensor` that requires gradients records a `Function` node holding its
inputs and the intermediates its backward rule needs. The nodes form an append-only DAG; calling
`Tensor.backward` on a scalar visits each node exactly once in reverse topological order and
accumulates gradients into the leaves.
"""

import logging
from contextlib import contextmanager
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from s4ecg.errors import ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

_DEFAULT_DTYPE: np.dtype = np.dtype(np.float64)
_GRAD_ENABLED = True

# tanh approximation of GeLU
GELU_SCALE = float(np.sqrt(2.0 / np.pi))
GELU_CUBIC = 0.044715


def set_default_dtype(dtype: Union[str, np.dtype, type]) -> None:
    """Sets the floating point precision used for new tensors.

    Args:
        dtype: float64 (tests, reproducibility) or float32 (speed)
    """
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported dtype {resolved}, expected float32 or float64")
    _DEFAULT_DTYPE = resolved


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextmanager
def no_grad() -> Iterator[None]:
    """Disables recording of operations, e.g. for evaluation"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums out the dimensions that were introduced or expanded by broadcasting"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError as e:
        raise ShapeError(f"Shapes {a} and {b} are not broadcast-compatible") from e


class Function:
    """A node of the tape.

    Subclasses implement `forward` on plain arrays and `backward`, which maps the gradient with
    respect to the output onto one gradient (or None) per input.
    """

    def __init__(self, *inputs: "Tensor") -> None:
        self.inputs = inputs

    @property
    def name(self) -> str:
        return type(self).__name__

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no forward rule")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{self.name} has no backward rule")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        node = cls(*inputs)
        values = node.forward(*(t.values for t in inputs), **kwargs)
        requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        return Tensor(values, requires_grad=requires_grad, creator=node if requires_grad else None)


class Tensor:
    """A dense array of reals with an optional gradient accumulator"""

    __array_ufunc__ = None

    def __init__(
        self,
        values: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype: Optional[Union[str, np.dtype]] = None,
    ) -> None:
        array = np.asarray(values).astype(_DEFAULT_DTYPE if dtype is None else dtype, copy=False)
        self.values: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(array) if requires_grad else None
        self._creator = creator

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def backward(self) -> None:
        """Accumulates d(self)/d(leaf) into every leaf that requires gradients"""
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward called on a tensor that does not require gradients")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._creator is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.values)
                node.grad = node.grad + grad
                continue
            input_grads = node._creator.backward(grad)
            for parent, parent_grad in zip(node._creator.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    # arithmetic

    def __add__(self, other: ArrayLike) -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return elementwise("add", as_tensor(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return elementwise("sub", self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return elementwise("sub", as_tensor(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return elementwise("mul", self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return elementwise("mul", as_tensor(other), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return elementwise("neg", self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # unary shortcuts

    def exp(self) -> "Tensor":
        return elementwise("exp", self)

    def log(self) -> "Tensor":
        return elementwise("log", self)

    def sigmoid(self) -> "Tensor":
        return elementwise("sigmoid", self)

    def gelu(self) -> "Tensor":
        return elementwise("gelu", self)

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        axes = range(self.ndim) if axis is None else np.atleast_1d(axis)
        count = int(np.prod([self.shape[a] for a in axes]))
        if count == 0:
            raise ShapeError(f"Cannot average over an empty axis of shape {self.shape}")
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes if axes else None)

    def swapaxes(self, first: int, second: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[first], axes[second] = axes[second], axes[first]
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def as_tensor(value: Union["Tensor", ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._creator is not None:
            for parent in node._creator.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


# elementwise operations


class _Binary(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return self.compute(a, b)

    def compute(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reduce(self, grad_a: np.ndarray, grad_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return unbroadcast(grad_a, self.shapes[0]), unbroadcast(grad_b, self.shapes[1])


class Add(_Binary):
    def compute(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.reduce(grad, grad)


class Sub(_Binary):
    def compute(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.reduce(grad, -grad)


class Mul(_Binary):
    def compute(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.reduce(grad * self.b, grad * self.a)


class Div(_Binary):
    def compute(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.reduce(grad / self.b, -grad * self.a / (self.b * self.b))


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return -a

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (-grad,)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a = a
        return np.log(a)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad / self.a,)


class Gelu(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a = a
        self.t = np.tanh(GELU_SCALE * (a + GELU_CUBIC * a**3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        a, t = self.a, self.t
        inner = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * a * a)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * inner),)


class Sigmoid(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.out = special.expit(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.out * (1.0 - self.out),)


class Relu(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.mask = a > 0
        return a * self.mask

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.mask,)


class Pow(Function):
    def forward(self, a: np.ndarray, exponent: float) -> np.ndarray:  # type: ignore[override]
        self.a, self.exponent = a, exponent
        return a**exponent

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.exponent * self.a ** (self.exponent - 1.0),)


_BINARY = {"add": Add, "sub": Sub, "mul": Mul}
_UNARY = {"neg": Neg, "exp": Exp, "log": Log, "gelu": Gelu, "sigmoid": Sigmoid}


def elementwise(op: str, a: Union[Tensor, ArrayLike], b: Optional[Union[Tensor, ArrayLike]] = None) -> Tensor:
    """Applies one of add, sub, mul, neg, exp, log, gelu, sigmoid.

    Binary operations broadcast over trailing dimensions.

    Args:
        op: operation identifier
        a: first operand
        b: second operand, required for binary operations

    Returns:
        the result, recorded on the tape when any input requires gradients
    """
    if op in _BINARY:
        if b is None:
            raise ValueError(f"Operation {op} requires two operands")
        return _BINARY[op].apply(as_tensor(a), as_tensor(b))
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"Operation {op} takes a single operand")
        return _UNARY[op].apply(as_tensor(a))
    raise ValueError(f"Unknown elementwise operation {op}")


# linear algebra and structure


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least two dimensions, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"Inner dimensions of {a.shape} and {b.shape} do not agree")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    return MatMul.apply(a, b)


class Sum(Function):
    def forward(  # type: ignore[override]
        self, a: np.ndarray, axis: Optional[Union[int, Tuple[int, ...]]], keepdims: bool
    ) -> np.ndarray:
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, tuple(int(a) for a in np.atleast_1d(self.axis) % len(self.shape)))
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:  # type: ignore[override]
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a: np.ndarray, axes: Optional[Tuple[int, ...]]) -> np.ndarray:  # type: ignore[override]
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a: np.ndarray, index: Any) -> np.ndarray:  # type: ignore[override]
        self.shape = a.shape
        self.index = index
        return a[index]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(self.shape, dtype=grad.dtype)
        if _is_basic_index(self.index):
            full[self.index] += grad
        else:
            np.add.at(full, self.index, grad)
        return (full,)


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(grad, self.bounds, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, reference)) if i != axis % len(reference)
        ):
            raise ShapeError(f"Cannot concatenate shapes {reference} and {t.shape} along axis {axis}")
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(t.reshape(tuple(shape)))
    return concat(expanded, axis=axis)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)
