"""
Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every op records its parents and a backward closure on the output tensor
(define-by-run). A fresh tape is built for each training step; gradients are
pulled out with :func:`grad` (functional, used by the trainers) or
:meth:`Tensor.backward` (accumulates into ``.grad`` on leaves).
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import AutodiffError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@contextmanager
def enable_grad():
    previous = is_grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    # ndarray <op> Tensor must dispatch to the Tensor reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Tuple["Tensor", ...] = (), backward: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = parents
        self._backward = backward

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        seed = _check_seed(self, seed)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        table = _backprop(self, seed, order)
        for node in order:
            if node._backward is None and id(node) in table:
                g = np.array(table[id(node)], dtype=np.float64)
                node.grad = g if node.grad is None else node.grad + g

    # operators

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
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


# elementwise binary ops

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def broadcast_to(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


# linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    left = a.data if a.ndim == 2 else a.data[None, :]
    right = b.data if b.ndim == 2 else b.data[:, None]
    product = left @ right
    out = product
    if a.ndim == 1:
        out = out[0]
    if b.ndim == 1:
        out = out[..., 0]

    def backward(g):
        g2 = np.reshape(g, product.shape)
        return (g2 @ right.T).reshape(a.shape), (left.T @ g2).reshape(b.shape)

    return _make(out, (a, b), backward, "matmul")


def affine(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """Batched ``x @ weight + bias`` for x of shape (batch, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] \
            or bias.shape != (weight.shape[1],):
        raise ShapeError("affine", x.shape, weight.shape, bias.shape)

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), backward, "affine")


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="needs a matrix")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


# nonlinearities

def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * sig

    def backward(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _make(out, (a,), backward, "silu")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise AutodiffError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


# reductions

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1) if a.data.size else 1.0

    def backward(g):
        return (_expand_reduced(g / count, a.shape, axis, keepdims),)

    return _make(out, (a,), backward, "mean")


def sq_l2(a: ArrayLike, axis=None) -> Tensor:
    """Squared L2 norm, over all entries or along ``axis``."""
    a = as_tensor(a)
    out = (a.data * a.data).sum(axis=axis)

    def backward(g):
        return (2.0 * a.data * _expand_reduced(g, a.shape, axis, False),)

    return _make(out, (a,), backward, "sq_l2")


# structural ops

def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (np.reshape(g, a.shape),), "reshape")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise AutodiffError("concat of an empty sequence")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(p.shape for p in parts)) from None
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, parts, backward, "concat")


def gather(table: ArrayLike, indices) -> Tensor:
    """Row lookup ``table[indices]``; used for label embeddings."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("gather", table.shape, indices.shape, detail="table must be 2-D")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise AutodiffError(
            f"gather index out of range [0, {table.shape[0]}): "
            f"min={indices.min()}, max={indices.max()}"
        )

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, indices, g)
        return (acc,)

    return _make(table.data[indices], (table,), backward, "gather")


def index(a: ArrayLike, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, key, g)
        return (acc,)

    return _make(out, (a,), backward, "index")


def stop_gradient(a: ArrayLike) -> Tensor:
    return Tensor(as_tensor(a).data)


# tape traversal

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _backprop(root: Tensor, seed: np.ndarray, order: Optional[List[Tensor]] = None) -> Dict[int, np.ndarray]:
    if order is None:
        order = _topological_order(root)
    grads: Dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        if node._backward is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return grads


def _check_seed(output: Tensor, seed) -> np.ndarray:
    if seed is None:
        if output.data.size != 1:
            raise AutodiffError(f"backward from non-scalar output {output.shape} needs a seed")
        return np.ones_like(output.data)
    seed = np.asarray(seed, dtype=np.float64)
    if output.shape == () and seed.shape != ():
        raise AutodiffError(f"scalar loss got a non-scalar seed of shape {seed.shape}")
    if seed.shape != output.shape:
        raise ShapeError("backward", output.shape, seed.shape, detail="seed must match output")
    return seed


def grad(output: Tensor, wrt: Sequence[Tensor], seed=None) -> List[np.ndarray]:
    """Gradients of ``output`` w.r.t. the leaf tensors ``wrt`` (zeros if unreachable)."""
    seed = _check_seed(output, seed)
    table = _backprop(output, seed) if output.requires_grad else {}
    result = []
    for leaf in wrt:
        g = table.get(id(leaf))
        result.append(np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64))
    return result


class Gradients:
    def __init__(self, inputs: List[np.ndarray], params: Dict[str, np.ndarray]):
        self.inputs = inputs
        self.params = params


class Graph:
    """A named define-by-run computation with declared input shapes.

    ``fn`` receives one Tensor per input and returns a Tensor or a list of
    Tensors. ``params`` are leaf tensors closed over by ``fn``.
    """

    def __init__(self, fn: Callable, input_shapes: Sequence[Tuple[int, ...]],
                 params: Optional[Dict[str, Tensor]] = None, name: str = "graph"):
        self.fn = fn
        self.input_shapes = [tuple(s) for s in input_shapes]
        self.params = params or {}
        self.name = name
        self._inputs: Optional[List[Tensor]] = None
        self._outputs: Optional[List[Tensor]] = None

    def forward(self, inputs: Sequence[ArrayLike]) -> List[np.ndarray]:
        if len(inputs) != len(self.input_shapes):
            raise AutodiffError(f"'{self.name}' expects {len(self.input_shapes)} inputs, got {len(inputs)}")
        arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
        for declared, arr in zip(self.input_shapes, arrays):
            if arr.shape != declared:
                raise ShapeError(self.name, declared, arr.shape, detail="input does not match declaration")
        self._inputs = [Tensor(arr, requires_grad=True) for arr in arrays]
        outputs = self.fn(*self._inputs)
        if isinstance(outputs, Tensor):
            outputs = [outputs]
        self._outputs = [as_tensor(o) for o in outputs]
        return [o.data.copy() for o in self._outputs]

    def backward(self, seed=None, output: int = 0) -> Gradients:
        if self._outputs is None:
            raise AutodiffError(f"backward on '{self.name}' before forward")
        target = self._outputs[output]
        names = list(self.params)
        leaves = self._inputs + [self.params[n] for n in names]
        grads = grad(target, leaves, seed)
        n_inputs = len(self._inputs)
        return Gradients(grads[:n_inputs], dict(zip(names, grads[n_inputs:])))


def forward(graph: Graph, inputs: Sequence[ArrayLike]) -> List[np.ndarray]:
    return graph.forward(inputs)


def backward(graph: Graph, seed=None, output: int = 0) -> Gradients:
    return graph.backward(seed, output)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central finite-difference gradients."""
    if eps <= 0:
        raise AutodiffError(f"grad_check eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    y = as_tensor(f(leaf))
    if y.data.size != 1:
        raise AutodiffError(f"grad_check needs a scalar function, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise AutodiffError("grad_check: f(x) is not finite")
    (analytic,) = grad(y, [leaf]) if y.requires_grad else (np.zeros_like(x),)

    numeric = np.empty_like(x)
    with no_grad():
        for i in range(x.size):
            shifted = x.copy()
            shifted.flat[i] = x.flat[i] + eps
            f_plus = as_tensor(f(Tensor(shifted))).item()
            shifted.flat[i] = x.flat[i] - eps
            f_minus = as_tensor(f(Tensor(shifted))).item()
            numeric.flat[i] = (f_plus - f_minus) / (2.0 * eps)
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
