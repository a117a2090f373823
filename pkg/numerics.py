"""
Reverse-mode automatic differentiation over dense numpy arrays.

Each op records its parents and a backward closure on the result tensor; the
chain of closures is the tape. ``backward`` walks it once in reverse
topological order and then clears it, so every forward pass builds a new one.
"""
import math
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import LabelError, ShapeError

logger = logging.getLogger('SpeechDPM')

LAYER_NORM_EPS = 1e-5

_DEFAULT_DTYPE = np.float32
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad():
    """Run ops without recording them on the tape (per thread)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """A dense array with an optional gradient buffer."""
    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward')

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = None):
        # numpy scalars from 0-d arithmetic keep their precision
        if isinstance(data, (np.ndarray, np.generic)) and dtype is None and np.issubdtype(data.dtype, np.floating):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
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
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -----------------------------------------------------------------------------
# Elementwise and structural ops
# -----------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast('add', a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast('mul', a, b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {original} as {tuple(shape)}") from None
    return _result(data, (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(count))


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (the time axis for ``(..., T, d)`` activations)."""
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(tensors), backward_fn)


def take(a: Tensor, index, axis: int) -> Tensor:
    """Select entries of ``a`` along ``axis`` (integer or integer array index)."""
    index = np.asarray(index)

    def backward_fn(g):
        grad = np.zeros_like(a.data)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0) if index.ndim else g)
        return (grad,)

    return _result(np.take(a.data, index, axis=axis), (a,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x.data ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner
        return (g * local,)

    return _result(out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


NONLINEARITIES = {'gelu': gelu, 'relu': relu, 'tanh': tanh}


# -----------------------------------------------------------------------------
# Linear algebra
# -----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast, inner dims must agree."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``weight`` of shape ``(out, in)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        flat_g = g.reshape(-1, g.shape[-1])
        flat_x = x.data.reshape(-1, x.shape[-1])
        grads = [g @ weight.data, flat_g.T @ flat_x]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis; a constant row maps to ``beta``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    n = x.shape[-1]

    def backward_fn(g):
        dxhat = g * gamma.data
        dx = (inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, n)
        dgamma = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return dx, dgamma, dbeta

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward_fn)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids span [{ids.min()}, {ids.max()}] outside table of {weight.shape[0]} rows")

    def backward_fn(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return _result(weight.data[ids], (weight,), backward_fn)


# -----------------------------------------------------------------------------
# Probabilities and losses
# -----------------------------------------------------------------------------

def _stable_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries receive probability 0."""
    y = _stable_softmax(x.data)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward_fn)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward_fn)


def cross_entropy(logits: Tensor, target, mask=None) -> Tensor:
    """
    Mean of ``-log softmax(logits)[target]`` over the (unmasked) leading positions.

    Args:
        logits: Array of shape ``(..., V)``.
        target: Integer class index (or array matching the leading shape).
        mask: Optional 0/1 weights over the leading shape; masked positions
            contribute neither loss nor gradient.

    Returns:
        A scalar tensor.
    """
    target = np.asarray(target, dtype=np.int64)
    n_classes = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise LabelError(f"cross_entropy: target {target.min()}..{target.max()} outside [0, {n_classes})")
    weights = np.ones(target.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    count = weights.sum()
    if count <= 0:
        raise ShapeError("cross_entropy: mask selects no positions")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - lse
    picked = np.take_along_axis(log_probs, target[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum() / count

    def backward_fn(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (weights / count)[..., None] * g,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


# -----------------------------------------------------------------------------
# Backward pass
# -----------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Populate ``.grad`` on every leaf that requires it, then clear the tape.

    Leaf gradients accumulate across calls until ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ShapeError("backward: loss was not recorded on a tape")
    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or parent_grad is None:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    for node in order:
        node._parents = ()
        node._backward = None


# -----------------------------------------------------------------------------
# Optimizers
# -----------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Learning rate, step counter and (for adam) per-parameter moments."""
    kind: str = 'adam'
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def create_optimizer(params: Sequence[Tensor], kind: str = 'adam', learning_rate: float = 5e-5) -> OptimizerState:
    if kind not in ('sgd', 'adam'):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if learning_rate < 0:
        raise ValueError(f"learning rate must be nonnegative, got {learning_rate}")
    state = OptimizerState(kind=kind, learning_rate=learning_rate)
    if kind == 'adam':
        state.moments = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params]
    return state


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """Apply one sgd or bias-corrected adam update in place."""
    for p in params:
        if p.grad is None:
            raise ShapeError(f"optimizer_step: parameter {p.name or p.shape} has no gradient")
        if p.grad.shape != p.shape:
            raise ShapeError(f"optimizer_step: grad {p.grad.shape} does not match parameter {p.shape}")
    state.step_count += 1
    lr = state.learning_rate
    if state.kind == 'sgd':
        for p in params:
            p.data -= (lr * p.grad).astype(p.dtype, copy=False)
        return
    if len(state.moments) != len(params):
        raise ShapeError(f"optimizer_step: {len(state.moments)} moment buffers for {len(params)} parameters")
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for p, (m, v) in zip(params, state.moments):
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
