"""Dense float64 tensors with reverse-mode autodiff.

Every op computes its forward value with numpy and, when any input requires a
gradient, records a closure mapping the output adjoint to one adjoint per
input. ``GradGraph`` orders the recorded nodes and runs those closures once.
Broadcasting is limited to adding a bias vector (or a single row) to a
matrix; everything else needs matching shapes.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass

import numpy as np

from pgca.core.errors import DimensionError, GraphError, NonDeterminismError, NonFiniteError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5

_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Forward passes inside this block record no graph (thread-local)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    def __init__(self, data, requires_grad=False, name=None):
        array = np.array(data, dtype=np.float64)
        if array.size == 0 or any(extent <= 0 for extent in array.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._consumed = False
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.data.size == 1 and self.data.size != 1:
                return scale(self, other)
            return mul(self, other)
        return mul_const(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_const(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, requires_grad=False, name=None):
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    return grad.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    bias = a.ndim >= 1 and (b.shape == (a.shape[-1],) or (a.ndim == 2 and b.shape == (1, a.shape[-1])))
    if a.shape != b.shape and not bias:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not match")

    def backward(g):
        return g, _reduce_to(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not match")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not match")
    return Tensor._from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x, s):
    """x times a single-valued tensor s (a gate, a coefficient)."""
    if s.data.size != 1:
        raise DimensionError(f"scale: factor must hold one value, got shape {s.shape}")
    factor = s.data.reshape(-1)[0]

    def backward(g):
        return g * factor, np.array(np.sum(g * x.data)).reshape(s.shape)

    return Tensor._from_op(x.data * factor, (x, s), backward, "scale")


def mul_const(x, c):
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def add_const(x, constant):
    """Adds a non-differentiable array (mask offsets, positional terms)."""
    constant = np.asarray(constant, dtype=np.float64)
    if constant.shape != x.shape:
        raise DimensionError(f"add_const: shapes {x.shape} and {constant.shape} do not match")
    return Tensor._from_op(x.data + constant, (x,), lambda g: (g,), "add_const")


def matmul(a, b):
    if a.ndim not in (2, 3) or a.ndim != b.ndim or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def reshape(x, shape):
    original = x.shape
    data = x.data.reshape(shape)
    return Tensor._from_op(data.copy(), (x,), lambda g: (g.reshape(original),), "reshape")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def softmax(x, axis=-1):
    if np.isnan(x.data).any():
        raise NonFiniteError("softmax: NaN in input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    if np.isnan(x.data).any():
        raise NonFiniteError("log_softmax: NaN in input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - log_z

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, (x,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: width {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def backward(g):
        g_hat = g * gamma.data
        dx = inv_std * (
            g_hat - g_hat.mean(axis=-1, keepdims=True) - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return dx, _reduce_to(g * x_hat, (d,)), _reduce_to(g, (d,))

    return Tensor._from_op(x_hat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def tanh(x):
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y**2),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    # tanh approximation; smooth everywhere, which finite differences need.
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du),)

    return Tensor._from_op(y, (x,), backward, "gelu")


def sum_all(x):
    return Tensor._from_op(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, g),), "sum")


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
        return Tensor._from_op(
            np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / count),), "mean"
        )
    count = x.shape[axis]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward, "mean")


def gather_rows(table, indices):
    """Embedding lookup: rows of ``table`` at ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for table of {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return Tensor._from_op(table.data[indices], (table,), backward, "gather_rows")


def pick(x, indices):
    """out[t] = x[t, indices[t]] for a 2-D x."""
    indices = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or indices.shape != (x.shape[0],):
        raise DimensionError(f"pick: {indices.shape[0] if indices.ndim else 0} indices for shape {x.shape}")
    rows = np.arange(x.shape[0])

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[rows, indices] = g
        return (grad,)

    return Tensor._from_op(x.data[rows, indices], (x,), backward, "pick")


def unfold_time(x, kernel):
    """(T, F) -> (T, kernel*F): each frame stacked with its zero-padded
    neighbours, so a matmul afterwards is a 1-D convolution over time."""
    if kernel % 2 != 1:
        raise DimensionError(f"unfold_time: kernel must be odd, got {kernel}")
    t, f = x.shape
    half = kernel // 2
    padded = np.zeros((t + 2 * half, f))
    padded[half : half + t] = x.data
    out = np.concatenate([padded[k : k + t] for k in range(kernel)], axis=1)

    def backward(g):
        grad = np.zeros((t + 2 * half, f))
        for k in range(kernel):
            grad[k : k + t] += g[:, k * f : (k + 1) * f]
        return (grad[half : half + t],)

    return Tensor._from_op(out, (x,), backward, "unfold_time")


class GradGraph:
    """Topologically ordered nodes reachable from a scalar loss."""

    def __init__(self, loss):
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.nodes = self._topological_order(loss)

    @staticmethod
    def _topological_order(root):
        order, visited = [], set()
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
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    @property
    def leaves(self):
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]

    def backward(self):
        if self.loss._consumed:
            raise GraphError("backward already ran on this graph; reset() it first")
        if not np.isfinite(self.loss.data).all():
            raise NonFiniteError("loss is not finite")
        pending = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        self.loss._consumed = True
        return self

    def reset(self):
        self.loss._consumed = False
        for leaf in self.leaves:
            leaf.grad = None


def backward(loss):
    return GradGraph(loss).backward()


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    worst_index: int
    n_checked: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def grad_check(f, params, eps=1e-5, tol=1e-4, abs_floor=1e-4):
    """Central differences against analytic gradients.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``.
    Relative error is |a - n| / max(|a|, |n|, abs_floor); the floor keeps
    near-zero gradients from turning float round-off into failures.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    with no_grad():
        repeat = f().item()
    if repeat != loss.item():
        raise NonDeterminismError(f"f() returned {loss.item()!r} then {repeat!r} for the same parameters")
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = (0.0, "", -1)
    checked = 0
    with no_grad():
        for index, (p, grad) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            flat_grad = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                plus = f().item()
                flat[i] = original - eps
                minus = f().item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * eps)
                rel = abs(flat_grad[i] - numeric) / max(abs(flat_grad[i]), abs(numeric), abs_floor)
                checked += 1
                if rel > worst[0]:
                    worst = (rel, p.name or f"param[{index}]", i)
    report = GradCheckReport(worst[0], worst[1], worst[2], checked, tol)
    logger.debug("grad_check: %d values, max rel error %.3e (%s[%d])", checked, *worst)
    return report
