"""Dense tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  ``backward`` orders
the graph topologically and runs each closure once, in reverse.
"""
from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


def _shape_error(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        data = np.asarray(data, dtype=dtype)
        self.data = data if data.flags.c_contiguous else data.copy()
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = x.dtype if isinstance(x, np.ndarray) and x.dtype.kind == "f" else DEFAULT_DTYPE
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data, parents, backward_fn, op):
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype, op=op)
    if requires:
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.shape == t.shape else np.broadcast_to(g, t.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a), dtype=ref.dtype)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b), dtype=ref.dtype)
    return a, b


# -- elementwise binary ops -------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    out_data = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw, "neg")


# -- elementwise unary ops --------------------------------------------------

def square(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), bw, "square")


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bw, "exp")


def log(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bw, "log")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), bw, "relu")


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)

    def bw(g):
        _accumulate(a, g * scale)

    return _make(a.data * scale, (a,), bw, "leaky_relu")


def sigmoid(a):
    a = as_tensor(a)
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw, "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw, "tanh")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bw(g):
        p = np.exp(out_data)
        _accumulate(a, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), bw, "log_softmax")


# -- reductions and shape ops ----------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), bw, "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def bw(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(out_data, (a,), bw, "transpose")


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "concatenate: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)
        ) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), bw, "concatenate")


def take(a, index):
    """Basic or integer-array indexing along the leading axes."""
    a = as_tensor(a)
    out_data = np.array(a.data[index], dtype=a.dtype)

    def bw(g):
        if not a.requires_grad:
            return
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(out_data, (a,), bw, "take")


def stop_gradient(a):
    return as_tensor(a).detach()


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise _shape_error("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        ad, bd = a.data, b.data
        if b.ndim == 1:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g[..., None] * bd, a.shape))
            if b.requires_grad:
                gb = (g[..., None] * ad).reshape(-1, bd.shape[0]).sum(axis=0)
                _accumulate(b, gb)
            return
        if a.ndim == 1:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(np.matmul(g[..., None, :], np.swapaxes(bd, -1, -2))[..., 0, :], a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(ad[:, None] * g[..., None, :], b.shape))
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape))

    return _make(out_data, (a, b), bw, "matmul")


# -- convolution ------------------------------------------------------------

def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def _col2im(cols, padded_shape, stride):
    _, _, kh, kw, oh, ow = cols.shape
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp


def _unpad(xp, pad):
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad]


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, kh, kw)."""
    x, w = _pair(x, w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    bsz, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise _shape_error("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out_data = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3]))  # (B, oh, ow, O)
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    parents = (x, w)
    if b is not None:
        b = as_tensor(b, dtype=x.dtype)
        if b.shape != (o,):
            raise _shape_error("conv2d bias", b.shape, (o,))
        out_data = out_data + b.data[None, :, None, None]
        parents = (x, w, b)

    def bw(g):
        if w.requires_grad:
            _accumulate(w, np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])))
        if x.requires_grad:
            gcols = np.tensordot(w.data, g, axes=([0], [1]))  # (C, kh, kw, B, oh, ow)
            gcols = np.ascontiguousarray(gcols.transpose(3, 0, 1, 2, 4, 5))
            _accumulate(x, _unpad(_col2im(gcols, xp.shape, stride), padding))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    return _make(out_data, parents, bw, "conv2d")


def conv_transpose2d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution of ``x`` (B, C, H, W) with ``w`` (C, O, kh, kw).

    Output size is ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    x, w = _pair(x, w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise _shape_error("conv_transpose2d", x.shape, w.shape)
    bsz, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (wd - 1) * stride - 2 * padding + kw + output_padding
    if oh < 1 or ow < 1:
        raise _shape_error("conv_transpose2d", x.shape, w.shape)
    padded_shape = (bsz, o, oh + 2 * padding, ow + 2 * padding)
    # scatter each input pixel's kernel footprint, the adjoint of im2col
    cols = np.tensordot(w.data, x.data, axes=([0], [1]))  # (O, kh, kw, B, h, w)
    cols = np.ascontiguousarray(cols.transpose(3, 0, 1, 2, 4, 5))
    full = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += cols[:, :, i, j]
    out_data = np.ascontiguousarray(_unpad(full, padding))
    parents = (x, w)
    if b is not None:
        b = as_tensor(b, dtype=x.dtype)
        if b.shape != (o,):
            raise _shape_error("conv_transpose2d bias", b.shape, (o,))
        out_data = out_data + b.data[None, :, None, None]
        parents = (x, w, b)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = np.empty((bsz, o, kh, kw, h, wd), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j] = gp[:, :, i:i + stride * h:stride, j:j + stride * wd:stride]
        if x.requires_grad:
            _accumulate(x, np.tensordot(gcols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2))
        if w.requires_grad:
            _accumulate(w, np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 4, 5])))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    return _make(out_data, parents, bw, "conv_transpose2d")


# -- graph traversal --------------------------------------------------------

def topological_order(root):
    """Nodes reachable from ``root`` that need gradients, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=loss.dtype)
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    interior = [n for n in order if n._backward is not None]
    for n in interior:
        n.grad = None
    _accumulate(loss, grad)
    try:
        for node in reversed(interior):
            if node.grad is not None:
                node._backward(node.grad)
    finally:
        # interior gradients are scratch space; only leaves keep theirs
        for n in interior:
            n.grad = None
