"""Dense-array numerics with reverse-mode automatic differentiation.

A `Tensor` wraps a contiguous numpy buffer and, when `requires_grad` is set,
participates in a dynamically recorded computation graph. Calling
`backward()` on a scalar result walks the graph once in reverse topological
order and accumulates gradients into the leaves. Gradients add across
repeated backward calls; use `zero_grad` (or `Tensor.grad = None`) to reset.

Everything runs on CPU. Training code uses float32; tests that need tight
identities construct float64 tensors, and ops preserve the operand dtype.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "check_finite",
    "cat",
    "stack",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised by `check_finite` when a tensor contains NaN or Inf."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording inside its body."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(value, dtype=None):
    if isinstance(value, Tensor):
        raise TypeError("expected raw data, got Tensor")
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32 if dtype is None else dtype)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing trailing-dim broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-dimensional array with optional gradient tracking.

    Attributes:
        data: contiguous row-major numpy buffer (float32 or float64).
        requires_grad: whether this tensor is a differentiable leaf or an
            interior node that must propagate gradients.
        grad: accumulated gradient buffer of identical shape, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(_as_array(data, dtype))
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- introspection ---------------------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        if self.requires_grad:

            def backward(g):
                return (g.astype(self.dtype),)

            return Tensor._from_op(self.data.astype(dtype), (self,), backward, "astype")
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"

    def zero_grad(self):
        self.grad = None

    # -- elementwise arithmetic ------------------------------------------------

    @staticmethod
    def _coerce(other, like: "Tensor"):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.dtype))

    @staticmethod
    def _check_broadcast(a_shape, b_shape, op):
        try:
            return np.broadcast_shapes(a_shape, b_shape)
        except ValueError:
            raise ShapeError(
                f"{op}: shapes {tuple(a_shape)} and {tuple(b_shape)} are not "
                f"broadcast-compatible"
            ) from None

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        Tensor._check_broadcast(self.shape, other.shape, "add")
        data = self.data + other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._from_op(data, (self, other), backward, "add")

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        Tensor._check_broadcast(self.shape, other.shape, "mul")
        data = self.data * other.data

        def backward(g):
            return (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            )

        return Tensor._from_op(data, (self, other), backward, "mul")

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        Tensor._check_broadcast(self.shape, other.shape, "sub")
        data = self.data - other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return Tensor._from_op(data, (self, other), backward, "sub")

    def __truediv__(self, other):
        other = Tensor._coerce(other, self)
        Tensor._check_broadcast(self.shape, other.shape, "div")
        data = self.data / other.data

        def backward(g):
            return (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * self.data / (other.data**2), other.shape),
            )

        return Tensor._from_op(data, (self, other), backward, "div")

    def __neg__(self):
        def backward(g):
            return (-g,)

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    def __radd__(self, other):
        return self.__add__(other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __rsub__(self, other):
        return Tensor._coerce(other, self).__sub__(self)

    def __rtruediv__(self, other):
        return Tensor._coerce(other, self).__truediv__(self)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("pow expects a scalar exponent")
        data = self.data**exponent

        def backward(g):
            return (g * exponent * self.data ** (exponent - 1),)

        return Tensor._from_op(data, (self,), backward, "pow")

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            return (g * data,)

        return Tensor._from_op(data, (self,), backward, "exp")

    def log(self):
        data = np.log(self.data)

        def backward(g):
            return (g / self.data,)

        return Tensor._from_op(data, (self,), backward, "log")

    def sqrt(self):
        data = np.sqrt(self.data)

        def backward(g):
            return (g * (0.5 / data),)

        return Tensor._from_op(data, (self,), backward, "sqrt")

    def tanh(self):
        data = np.tanh(self.data)

        def backward(g):
            return (g * (1.0 - data * data),)

        return Tensor._from_op(data, (self,), backward, "tanh")

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            return (g * data * (1.0 - data),)

        return Tensor._from_op(data, (self,), backward, "sigmoid")

    def silu(self):
        """x * sigmoid(x), the activation used throughout the networks."""
        sig = 1.0 / (1.0 + np.exp(-self.data))
        data = self.data * sig

        def backward(g):
            return (g * (sig * (1.0 + self.data * (1.0 - sig))),)

        return Tensor._from_op(data, (self,), backward, "silu")

    def relu(self):
        mask = self.data > 0

        def backward(g):
            return (g * mask,)

        return Tensor._from_op(self.data * mask, (self,), backward, "relu")

    # -- contraction and normalization ----------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = Tensor._coerce(other, self)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul expects tensors of rank >= 2")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(
                f"matmul: inner dimensions differ, {self.shape} vs {other.shape}"
            )
        data = np.matmul(self.data, other.data)

        def backward(g):
            ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
            gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
            return _unbroadcast(ga, self.shape), _unbroadcast(gb, other.shape)

        return Tensor._from_op(data, (self, other), backward, "matmul")

    def __matmul__(self, other):
        return self.matmul(other)

    def softmax(self, axis: int = -1) -> "Tensor":
        """Numerically stabilized softmax along `axis` (max-subtraction)."""
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return (data * (g - dot),)

        return Tensor._from_op(data, (self,), backward, "softmax")

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(self.dtype, copy=True),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).astype(self.dtype, copy=True),)

        return Tensor._from_op(np.asarray(data), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- movement ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)

        def backward(g):
            return (g.reshape(old),)

        return Tensor._from_op(data, (self,), backward, "reshape")

    def transpose(self, axes) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        data = np.ascontiguousarray(self.data.transpose(axes))

        def backward(g):
            return (np.ascontiguousarray(g.transpose(inv)),)

        return Tensor._from_op(data, (self,), backward, "transpose")

    def __getitem__(self, index) -> "Tensor":
        data = self.data[index]
        if np.isscalar(data):
            data = np.asarray(data)
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.ascontiguousarray(data), (self,), backward, "slice")

    # -- backward pass -------------------------------------------------------------

    def backward(self):
        """Populate gradients of every tracked tensor reachable from this scalar.

        Repeated calls accumulate into existing `.grad` buffers. Raises
        ShapeError if this tensor is not a scalar (size 1).
        """
        if self.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")

        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def check_finite(t: Tensor, name: str = "tensor") -> Tensor:
    """Validation op: raise NonFiniteError if `t` contains NaN or Inf."""
    if not np.all(np.isfinite(t.data)):
        bad = int(np.size(t.data) - np.count_nonzero(np.isfinite(t.data)))
        raise NonFiniteError(f"{name} contains {bad} non-finite values (op={t._op})")
    return t


def cat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis` with gradient routing."""
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(out)

    return Tensor._from_op(data, tuple(tensors), backward, "cat")


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack tensors along a new axis."""
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors)))

    return Tensor._from_op(data, tuple(tensors), backward, "stack")
