"""
Tensor - reverse-mode differentiable array
A numpy array plus a gradient slot and a closure that pushes gradients to
its parents. Just enough autodiff for the segmentation network, nothing more.
"""

import threading
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, NumericalError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def count_macs():
    """
    Count multiply-accumulates performed by convolutions and matmuls.

    Yields:
        A dict whose "macs" entry is updated in place while the block runs.
    """
    previous = getattr(_state, "macs", None)
    counter = {"macs": 0}
    _state.macs = counter
    try:
        yield counter
    finally:
        _state.macs = previous


def record_macs(n: int) -> None:
    counter = getattr(_state, "macs", None)
    if counter is not None:
        counter["macs"] += int(n)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense real array with an optional gradient.

    Activations crossing block boundaries are rank-4 (batch, channels, height,
    width); parameters and attention internals use whatever rank they need.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], None],
    ) -> "Tensor":
        """Wrap an op result, attaching the backward closure only when needed."""
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- properties ---------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- gradient plumbing --------------------------------------------------

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no history."""
        return Tensor(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this tensor to every leaf that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = self._topological_order()
        self.accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def assert_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in {self.name or what} (shape {self.shape})")
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise NumericalError(f"non-finite gradient in {self.name or what} (shape {self.shape})")

    # -- algebra ------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)


def _as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return Tensor.from_op(a.data + b.data, (a, b), _backward)


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: a.accumulate(-g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return Tensor.from_op(a.data * b.data, (a, b), _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the two trailing axes (numpy broadcasting)."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    record_macs(out.size * a.shape[-1])

    def _backward(g):
        if a.requires_grad:
            a.accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b.accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor.from_op(out, (a, b), _backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: a.accumulate(g.reshape(a.shape)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.transpose(a.data, axes), (a,), lambda g: a.accumulate(np.transpose(g, inverse))
    )


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return Tensor.from_op(np.asarray(out), (a,), _backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


class ParamStore:
    """Named parameters in declaration order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        if not tensor.requires_grad:
            raise ConfigurationError(f"parameter {name} must require grad")
        tensor.name = name
        self._params[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def num_elements(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self._params.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-4,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """
    Compare the analytic gradient of a scalar function with central differences.

    Args:
        f: Function of `x` returning a scalar Tensor; may close over other tensors
        x: Point of evaluation; must require grad
        epsilon: Finite-difference step, in (0, 1e-2]
        indices: Optional flat coordinates to probe (all coordinates by default)

    Returns:
        max over probed coordinates of |analytic - numeric| / max(1, |numeric|)
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ConfigurationError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    if not x.requires_grad:
        raise ConfigurationError("grad_check needs x.requires_grad = True")

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    x.zero_grad()
    y = f(x)
    value = float(np.sum(y.data))
    if not np.isfinite(value):
        raise NumericalError(f"function value is not finite: {value}")
    y.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in probe:
            original = flat[i]
            flat[i] = original + epsilon
            up = float(np.sum(f(x).data))
            flat[i] = original - epsilon
            down = float(np.sum(f(x).data))
            flat[i] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"function value is not finite near coordinate {i}")
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
