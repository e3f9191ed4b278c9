"""Reverse-mode automatic differentiation over real numpy arrays.

A :class:`Tape` records every primitive applied to tensors that require
gradients while the tape is active::

    with Tape() as tape:
        loss = (w * x).sum()
    grads = tape.backward(loss, [w])

Nodes are appended in execution order, so walking the list backwards is a
reverse topological order and each node is visited once.
"""

import numpy as np

from flownull import kernels

_TAPES = []


class PoisonedGradientError(FloatingPointError):
    """A forward value feeding the loss is NaN or infinite."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite forward value produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Tape:
    """Record of differentiable primitives; single owner, not shareable."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out, parents, vjp, op):
        self.nodes.append((out, parents, vjp, op))

    def backward(self, loss, leaves):
        return backward(self, loss, leaves)


def no_tape_active():
    return not _TAPES


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjp, op):
    track = bool(_TAPES) and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        _TAPES[-1].record(out, parents, vjp, op)
    return out


def backward(tape, loss, leaves):
    """Gradients of scalar ``loss`` w.r.t. every tensor in ``leaves``.

    Leaves the loss does not depend on get exact zeros. Raises
    :class:`PoisonedGradientError` naming the first op whose forward output
    was non-finite if the loss or any gradient is NaN/Inf.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        _raise_poisoned(tape, loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, vjp, _op in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        elif not np.all(np.isfinite(g)):
            _raise_poisoned(tape, loss)
        result.append(g.astype(leaf.dtype, copy=False))
    return result


def _raise_poisoned(tape, loss):
    for out, _parents, _vjp, op in tape.nodes:
        if not np.all(np.isfinite(out.data)):
            raise PoisonedGradientError(op)
    raise PoisonedGradientError("loss")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log_abs(a):
    return _make(np.log(np.abs(a.data)), (a,), lambda g: (g / a.data,), "log_abs")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def leaky_relu(a, slope=0.2):
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * a.data.dtype.type(slope))
    return _make(out, (a,), lambda g: (np.where(pos, g, g * slope).astype(g.dtype),),
                 "leaky_relu")


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# -- reductions and shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 vjp, "concat")


def narrow(a, axis, start, length):
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), vjp, "narrow")


def matmul(a, b):
    a, b = _pair(a, b)
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ np.swapaxes(b.data, -1, -2),
                            np.swapaxes(a.data, -1, -2) @ g), "matmul")


# -- image ops (NCHW) -------------------------------------------------------

def conv2d(x, w, b=None, padding=None):
    """Stride-1 2-D convolution (cross-correlation), 'same' padding by default."""
    N, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if Ci != C:
        raise ValueError(f"conv2d expects {Ci} input channels, got {C}")
    pad = (kh - 1) // 2 if padding is None else padding
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    wm = w.data.reshape(O, -1)
    if kh == 1 and kw == 1 and pad == 0:
        cols = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(C, -1)
    else:
        cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, pad)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3))

    def vjp(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wm.T @ gm
            if kh == 1 and kw == 1 and pad == 0:
                gx = np.ascontiguousarray(gcols.reshape(C, N, H, W).transpose(1, 0, 2, 3))
            else:
                gx = kernels.col2im(gcols, N, C, H, W, kh, kw, pad)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp, "conv2d")


def channel_mix(x, q):
    """Apply the fixed (C, C) matrix ``q`` across channels at every pixel."""
    qa = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=x.dtype)
    out = np.einsum("oc,nchw->nohw", qa, x.data, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("oc,nohw->nchw", qa, g, optimize=True),),
                 "channel_mix")


def avg_pool2(x):
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {H}x{W}")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), vjp, "avg_pool2")


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), vjp, "upsample2")


def space_to_depth(x):
    """(N, C, H, W) -> (N, 4C, H/2, W/2); channel index is c*4 + 2*di + dj."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"squeeze needs even spatial dims, got {H}x{W}")
    y = x.reshape(N, C, H // 2, 2, W // 2, 2)
    y = y.transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(N, 4 * C, H // 2, W // 2)


def depth_to_space(x):
    N, C4, H, W = x.shape
    if C4 % 4:
        raise ValueError(f"unsqueeze needs channels divisible by 4, got {C4}")
    y = x.reshape(N, C4 // 4, 2, 2, H, W)
    y = y.transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(N, C4 // 4, 2 * H, 2 * W)
