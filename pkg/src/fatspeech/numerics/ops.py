"""Primitive differentiable ops over Tensors.

Forward math is plain numpy; each op wires a closure-based backward rule onto
the active tape via record_op. Shapes are validated up front and violations
raise ShapeError naming the op and both shapes.

Broadcasting: add and mul accept numpy-broadcastable operands and their
backward rules sum gradients over the broadcast axes. Everything else is
strict about rank.
"""

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, record_op


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(op, a.data.shape, b.data.shape) from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    out = Tensor(a.data + b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return record_op("add", (a, b), out, backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    out = Tensor(a.data - b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return record_op("sub", (a, b), out, backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return record_op("mul", (a, b), out, backward)


def neg(a):
    return scale(a, -1.0)


def scale(a, c):
    """Multiply by a python scalar (not differentiated through c)."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.data.dtype))

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad * np.asarray(c, dtype=a.data.dtype))

    return record_op("scale", (a,), out, backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    out = Tensor(a.data @ b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return record_op("matmul", (a, b), out, backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes).copy())

    def backward():
        if a.requires_grad:
            a.accumulate_grad(np.transpose(out.grad, inverse))

    return record_op("transpose", (a,), out, backward)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.data.shape, tuple(shape)) from None
    out = Tensor(data.copy())

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.data.shape))

    return record_op("reshape", (a,), out, backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", (), detail="empty input list")
    rank = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != rank:
            raise ShapeError("concat", tensors[0].data.shape, t.data.shape)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return record_op("concat", tuple(tensors), out, backward)


def slice_(a, axis, start, stop):
    a = as_tensor(a)
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError("slice", a.data.shape,
                         detail=f"[{start}:{stop}] on axis {axis} of extent {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            a.accumulate_grad(g)

    return record_op("slice", (a,), out, backward)


def gather_rows(table, ids):
    """Select rows of a 2-D table by integer index; backward scatter-adds."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError("gather_rows", table.data.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("gather_rows", table.data.shape, ids.shape,
                         detail="index out of range")
    out = Tensor(table.data[ids].copy())

    def backward():
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table.accumulate_grad(g)

    return record_op("gather_rows", (table,), out, backward)


def sum_(a, axis=None):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis))

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return record_op("sum", (a,), out, backward)


def mean_(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / count)


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad * (a.data > 0))

    return record_op("relu", (a,), out, backward)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a):
    """Gaussian error linear unit, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    th = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + th))

    def backward():
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
            local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * du
            a.accumulate_grad(out.grad * local)

    return record_op("gelu", (a,), out, backward)


def softmax(a):
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            g = out.grad
            a.accumulate_grad(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return record_op("softmax", (a,), out, backward)


def log_softmax(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            g = out.grad
            sm = np.exp(y)
            a.accumulate_grad(g - sm * g.sum(axis=-1, keepdims=True))

    return record_op("log_softmax", (a,), out, backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm", x.data.shape, gain.data.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward():
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * term)

    return record_op("layer_norm", (x, gain, bias), out, backward)


def mse(pred, target):
    """Mean squared error over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError("mse", pred.data.shape, target.data.shape)
    diff = pred.data - target.data
    out = Tensor(np.asarray((diff ** 2).mean(), dtype=pred.data.dtype))

    def backward():
        g = out.grad * 2.0 / diff.size
        if pred.requires_grad:
            pred.accumulate_grad(g * diff)
        if target.requires_grad:
            target.accumulate_grad(-g * diff)

    return record_op("mse", (pred, target), out, backward)


def cross_entropy(logits, targets, reduction="mean", smoothing=0.0):
    """Negative log-likelihood of integer targets under softmax(logits).

    With label smoothing s, the target distribution is (1-s)*onehot + s/V.
    reduction is "mean" (over rows) or "sum".
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 \
            or logits.data.shape[0] != targets.shape[0]:
        raise ShapeError("cross_entropy", logits.data.shape, targets.shape)
    n, v = logits.data.shape
    if n == 0:
        raise ShapeError("cross_entropy", logits.data.shape, detail="empty batch")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError("cross_entropy", logits.data.shape, targets.shape,
                         detail="target id out of range")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    q = np.full((n, v), smoothing / v, dtype=logits.data.dtype)
    q[np.arange(n), targets] += 1.0 - smoothing
    per_row = -(q * logp).sum(axis=-1)
    total = per_row.sum()
    if reduction == "mean":
        total = total / n
    out = Tensor(np.asarray(total, dtype=logits.data.dtype))

    def backward():
        if logits.requires_grad:
            g = out.grad
            if reduction == "mean":
                g = g / n
            logits.accumulate_grad(g * (np.exp(logp) - q))

    return record_op("cross_entropy", (logits,), out, backward)
