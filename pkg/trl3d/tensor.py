"""
Minimal reverse-mode tensor engine.

Every value is a float64 numpy array. An operation whose inputs track
gradients records its parents and a closure mapping the upstream gradient
to one gradient per parent. ``Tensor.backward`` walks that graph in reverse
topological order, accumulates ``grad`` on every reachable tensor and then
releases the graph.
"""

from __future__ import annotations

import contextlib
import logging
import zlib
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import GradientTapeError, NumericError, ShapeError

logger = logging.getLogger(__name__)

Axis = Optional[int]
Operand = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericError("tensor values must be finite")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        array = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = array
        out.grad = None
        out._op = op
        out._consumed = False
        tracked = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    # properties
    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op or 'leaf'!r})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operators
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    # backward pass
    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor and release the graph."""
        if self.size != 1:
            raise GradientTapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GradientTapeError("backward() already ran on this loss; run the forward pass again")
        if not self.requires_grad:
            raise GradientTapeError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            upstream = pending.pop(id(node), None)
            if upstream is None:
                continue
            node.grad = upstream if node.grad is None else node.grad + upstream
            if node._backward is None:
                continue
            for parent, grad in zip(node._parents, node._backward(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + grad if key in pending else grad

        for node in order:
            node._parents = ()
            node._backward = None
        self._consumed = True


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: Any) -> Tensor:
    """A leaf that tracks gradients."""
    return Tensor(data, requires_grad=True)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def _check_axis(op: str, a: Tensor, axis: Axis) -> None:
    if axis is None:
        if a.size == 0:
            raise ShapeError(f"{op}: cannot reduce an empty tensor")
        return
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeError(f"{op}: reduction axis {axis} of shape {a.shape} is empty")


# elementwise
def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    """Broadcasting ``a / b``; any zero in ``b`` raises NumericError instead of producing inf."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0.0):
        raise NumericError("div: division by zero")

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._result(a.data / b.data, (a, b), backward, "div")


def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Operand) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0  # subgradient at 0 is 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a: Operand) -> Tensor:
    a = as_tensor(a)
    sigmoid = np.exp(-np.logaddexp(0.0, -a.data))
    return Tensor._result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * sigmoid,), "softplus")


def exp(a: Operand) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Operand) -> Tensor:
    """Natural log, defined for strictly positive input only."""
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log: input must be positive")
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Operand) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise NumericError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def sin(a: Operand) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Operand) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"relu": relu, "softplus": softplus, "neg": neg, "exp": exp, "log": log, "sqrt": sqrt}


def elementwise(op: str, a: Operand, b: Optional[Operand] = None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# linear algebra
def matmul(a: Operand, b: Operand) -> Tensor:
    """
    Batched matrix product ``a @ b`` with numpy broadcasting of the leading axes.

    Args:
        a: Operand of shape [..., n, k]
        b: Operand of shape [..., k, p]; the batch prefix must broadcast with ``a``'s

    Returns:
        Tensor [..., n, p]; each gradient is summed back over the axes its operand was broadcast along
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch prefixes of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Operand, weight: Operand, bias: Optional[Operand] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width of {x.shape} does not match weight {weight.shape}")
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, x.shape[0])), weight), (weight.shape[1],))
    else:
        out = matmul(x, weight)
    if bias is None:
        return out
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return add(out, bias)


# reductions
def tsum(a: Operand, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Sum over one axis, or every axis when ``axis`` is None."""
    a = as_tensor(a)
    _check_axis("sum", a, axis)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Operand, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("mean", a, axis)
    count = a.size if axis is None else a.shape[axis]
    return div(tsum(a, axis, keepdims), float(count))


def tmax(a: Operand, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient flows to the lowest-index maximiser."""
    a = as_tensor(a)
    _check_axis("max", a, axis)
    if axis is None:
        flat = int(np.argmax(a.data))

        def backward_all(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            grad = np.zeros(a.size)
            grad[flat] = float(np.sum(g))
            return (grad.reshape(a.shape),)

        value = a.data.reshape(-1)[flat]
        return Tensor._result(np.full((1,) * a.ndim, value) if keepdims else value, (a,), backward_all, "max")

    index = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, index, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (grad,)

    out = np.take_along_axis(a.data, index, axis=axis)
    return Tensor._result(out if keepdims else np.squeeze(out, axis), (a,), backward, "max")


def argmax(a: Operand, axis: Axis = None) -> Tensor:
    """Index of the maximum; ties resolve to the lowest index."""
    a = as_tensor(a)
    _check_axis("argmax", a, axis)
    return Tensor(np.argmax(a.data, axis=axis).astype(np.float64))


_REDUCTIONS = {"sum": tsum, "mean": mean, "max": tmax}


def reduce(op: str, a: Operand, axis: Axis = None) -> Tensor:
    """Dispatch a reduction by name."""
    if op == "argmax":
        return argmax(a, axis)
    if op not in _REDUCTIONS:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCTIONS[op](a, axis)


# movement
def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(perm))
    return Tensor._result(np.transpose(a.data, perm), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Operand, first: int, second: int) -> Tensor:
    a = as_tensor(a)
    perm = list(range(a.ndim))
    perm[first], perm[second] = perm[second], perm[first]
    return transpose(a, perm)


def getitem(a: Operand, index: Any) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor._result(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    """Join along an existing axis; the gradient is split back at the part boundaries."""
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]} on axis {axis}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, parts, backward, "concat")


def stack(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts or any(p.shape != parts[0].shape for p in parts):
        raise ShapeError(f"stack: shapes differ {[p.shape for p in parts]}")
    out = np.stack([p.data for p in parts], axis=axis)
    position = axis if axis >= 0 else out.ndim + axis

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return tuple(np.take(g, i, axis=position) for i in range(len(parts)))

    return Tensor._result(out, parts, backward, "stack")


def broadcast_to(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


# normalisation
def softmax(x: Operand, axis: int = -1) -> Tensor:
    """Softmax over ``axis``, computed on max-shifted logits."""
    x = as_tensor(x)
    shifted = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    out = shifted / np.sum(shifted, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax")


def log_softmax(x: Operand, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward, "log_softmax")


def layer_norm(
    x: Operand,
    gamma: Optional[Operand] = None,
    beta: Optional[Operand] = None,
    axis: int = -1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Normalise slices along ``axis`` to zero mean and unit variance.

    Args:
        x: Operand to normalise
        gamma: Optional scale broadcast against the output
        beta: Optional shift broadcast against the output
        axis: Axis whose slices are normalised
        eps: Added to the variance

    Returns:
        ``gamma * (x - mean) / sqrt(var + eps) + beta``
    """
    x = as_tensor(x)
    _check_axis("layer_norm", x, axis)
    centred = x.data - np.mean(x.data, axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centred * centred, axis=axis, keepdims=True) + eps)
    normed = centred * inv_std

    def backward_norm(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad = inv_std * (
            g - np.mean(g, axis=axis, keepdims=True) - normed * np.mean(g * normed, axis=axis, keepdims=True)
        )
        return (grad,)

    out = Tensor._result(normed, (x,), backward_norm, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def l2_normalize(x: Operand, axis: int = -1, eps: float = 1e-24) -> Tensor:
    """
    Scale slices along ``axis`` to unit Euclidean norm.

    Args:
        x: Operand to normalise
        axis: Axis holding each vector
        eps: Added to the squared norm before the square root; keeps an all-zero slice finite

    Returns:
        ``x / sqrt(sum(x*x) + eps)``; its gradient is orthogonal to the output slice
    """
    x = as_tensor(x)
    return div(x, sqrt(add(tsum(mul(x, x), axis=axis, keepdims=True), eps)))


class Rng:
    """Seeded random stream; identical seed and key give identical draws."""

    def __init__(self, seed: int, key: Tuple[int, ...] = ()) -> None:
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(key)
        self._generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key))
        )

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"

    def child(self, name: Union[str, int]) -> "Rng":
        """Independent stream derived from this one's seed and a name."""
        tag = zlib.crc32(name.encode("utf-8")) if isinstance(name, str) else int(name)
        return Rng(self.seed, self.key + (tag,))

    def uniform(self, low: float = 0.0, high: float = 1.0, size: Any = None) -> np.ndarray:
        return self._generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size: Any = None) -> np.ndarray:
        return self._generator.normal(loc, scale, size)

    def integers(self, low: int, high: int, size: Any = None) -> np.ndarray:
        return self._generator.integers(low, high, size)

    def choice(self, population: Any, size: Any = None, replace: bool = True) -> np.ndarray:
        return self._generator.choice(population, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)
