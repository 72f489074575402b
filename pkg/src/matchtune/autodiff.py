"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to one gradient per parent.  The graph
is implicit in those links and lives exactly as long as the tensors of one
training step reference each other; nothing is kept globally, so independent
graphs can be built concurrently.

Gradients are only stored on leaves (tensors without parents) and are always
accumulated, never overwritten.  Call :func:`zero_grad` before each backward
pass.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError, NumericError, ParameterError, UsageError

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "zero_grad",
    "matmul",
    "row_softmax",
    "log_softmax",
    "ce_per_instance",
    "loss_ce",
    "loss_mse",
    "concat",
    "finite_diff_check",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), bw)


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def transpose(a):
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 dims, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: incompatible shapes {a.shape} and {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, index):
    """Indexing, row selection and gathers; repeated indices accumulate."""
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw)


def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw)


# ----------------------------------------------------------------------------
# softmax family and losses


def row_softmax(a, temperature=1.0):
    """Softmax along the last axis of ``a / temperature``.

    The row maximum is subtracted before exponentiation.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature!r}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("row_softmax: non-finite input")
    z = np.exp((a.data - a.data.max(axis=-1, keepdims=True)) / temperature)
    out = z / z.sum(axis=-1, keepdims=True)
    inv_t = 1.0 / temperature

    def bw(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * out * inv_t,)

    return _make(out, (a,), bw)


def log_softmax(a):
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax: non-finite input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw)


def _check_labels(labels, n, num_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits rows {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label outside [0, {num_classes})")
    return labels.astype(np.int64)


def ce_per_instance(logits, labels):
    """Negative log-likelihood of the true class for every row of ``logits``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross-entropy expects n x C logits, got shape {logits.shape}")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("cross-entropy: non-finite logits")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    out = logz - shifted[rows, labels]

    def bw(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return _make(out, (logits,), bw)


def loss_ce(logits, labels):
    """Mean cross-entropy over the batch."""
    return mean(ce_per_instance(logits, labels))


def loss_mse(pred, target):
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction shape {pred.shape} vs target shape {target.shape}")
    diff = pred - Tensor(target)
    return mean(diff * diff)


# ----------------------------------------------------------------------------
# gradient engine


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params):
    for p in params:
        p.zero_grad()


def finite_diff_check(f, params, h=1e-5):
    """Worst relative error between backward() and central differences.

    ``f`` is called with no arguments and must rebuild the scalar loss from
    the current values of ``params`` each time.  The relative error of one
    element is ``|a - n| / max(|a|, |n|, 1e-8)``; any non-finite value makes
    the result ``inf``.
    """
    if not h > 0:
        raise ParameterError(f"step must be positive, got {h!r}")
    params = list(params)
    zero_grad(params)
    backward(f())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = f().item()
            p.data[idx] = orig - h
            down = f().item()
            p.data[idx] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[idx]
            if not (np.isfinite(a) and np.isfinite(numeric)):
                return float("inf")
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
