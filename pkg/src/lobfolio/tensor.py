"""Dense tensors with recorded reverse-mode differentiation.

A Tensor wraps a numpy array plus an optional gradient buffer. Operations
record their inputs and a backward closure on the result; calling
``backward()`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into every ``requires_grad``
leaf. Training runs at float32; gradient checks should build float64
tensors (central differences are unreliable at float32).

Only what the network stack needs is implemented: elementwise arithmetic,
matmul, 2D cross-correlation with stride and valid/same padding, max
pooling, the usual activations, stable (log-)softmax, reductions, concat,
reshape/transpose/indexing, and a finite-difference checker.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-dimensional array participating in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_op", "_done")
    __array_priority__ = 100  # keep numpy from hijacking ndarray <op> Tensor

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._done = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- autodiff core --------------------------------------------------------

    def _accumulate(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + g

    def backward(self):
        """Reverse sweep from a scalar; fills grads of requires_grad leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward already ran on this graph node")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._done = True

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    """Coerce the non-Tensor operand to the Tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _as_tensor(a, like=b), b
    return _as_tensor(a), _as_tensor(b)


def _make(data, parents, backward, op):
    """Wrap an op result; records the closure only when grads are live."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out._op = op
    out._done = False
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g, shape):
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward, "div")


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward, "pow")


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, "exp")


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward, "log")


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward, "sqrt")


def sigmoid(a):
    a = _as_tensor(a)
    # tanh form is overflow-safe at both tails
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward, "tanh")


def leaky_relu(a, slope=0.01):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = _as_tensor(a)
    mask = a.data >= 0
    out_data = np.where(mask, a.data, slope * a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.where(mask, g, np.asarray(slope, g.dtype) * g))

    return _make(out_data, (a,), backward, "leaky_relu")


# -- softmax family -----------------------------------------------------------

def softmax(a, axis=-1):
    """Exp-normalize along ``axis`` with max-subtraction for stability."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward, "log_softmax")


# -- reductions -----------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _make(np.asarray(out_data), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def std(a, axis=None):
    """Population standard deviation, differentiable (composite op)."""
    a = _as_tensor(a)
    centered = sub(a, mean(a, axis=axis, keepdims=axis is not None))
    return sqrt(mean(mul(centered, centered), axis=axis))


# -- shape manipulation ---------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), backward, "reshape")


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    out_data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _make(out_data, (a,), backward, "transpose")


def getitem(a, idx):
    a = _as_tensor(a)
    out_data = np.array(a.data[idx])
    advanced = isinstance(idx, (np.ndarray, list)) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx))

    def backward(g):
        if not a.requires_grad:
            return
        gx = np.zeros_like(a.data)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        a._accumulate(gx)

    return _make(out_data, (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward, "concat")


# -- linear algebra ---------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward, "matmul")


# -- convolution / pooling ---------------------------------------------------------

def _pad_amounts(size, k, s, padding):
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-size // s)  # ceil
        total = max((out - 1) * s + k - size, 0)
        return total // 2, total - total // 2  # extra cell on the trailing side
    raise ValueError(f"unknown padding {padding!r}")


def _conv_view(xp, kh, kw, sh, sw):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    sn, sc, sh_, sw_ = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, c, kh, kw),
        (sn, sh_ * sh, sw_ * sw, sc, sh_, sw_), writeable=False)
    return view, ho, wo


def _dilate(g, sh, sw):
    if sh == 1 and sw == 1:
        return g
    n, f, ho, wo = g.shape
    out = np.zeros((n, f, (ho - 1) * sh + 1, (wo - 1) * sw + 1), dtype=g.dtype)
    out[:, :, ::sh, ::sw] = g
    return out


def conv2d(x, w, b=None, stride=(1, 1), padding="valid"):
    """Cross-correlate x[N,C,H,W] with w[F,C,kh,kw]; optional bias b[F]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    sh, sw = stride
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ph0, ph1 = _pad_amounts(h, kh, sh, padding)
    pw0, pw1 = _pad_amounts(wd, kw, sw, padding)
    if h + ph0 + ph1 < kh or wd + pw0 + pw1 < kw:
        raise ValueError(f"kernel ({kh},{kw}) larger than padded input ({h + ph0 + ph1},{wd + pw0 + pw1})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1))) if (ph0 or ph1 or pw0 or pw1) else x.data
    view, ho, wo = _conv_view(xp, kh, kw, sh, sw)
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d output has zero size")
    out_data = np.tensordot(view, w.data, axes=([3, 4, 5], [1, 2, 3]))  # (N,Ho,Wo,F)
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    if b is not None:
        b = _as_tensor(b)
        out_data = out_data + b.data[None, :, None, None]
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        gn = g.transpose(0, 2, 3, 1)  # (N,Ho,Wo,F)
        if w.requires_grad:
            gw = np.tensordot(gn, view, axes=([0, 1, 2], [0, 1, 2]))  # (F,C,kh,kw)
            w._accumulate(gw)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gd = _dilate(g, sh, sw)
            gdp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))  # (C,F,kh,kw)
            gview, hu, wu = _conv_view(gdp, kh, kw, 1, 1)
            gxu = np.tensordot(gview, wf, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            if (hu, wu) != (hp, wp):
                full = np.zeros((n, c, hp, wp), dtype=g.dtype)
                full[:, :, :hu, :wu] = gxu
                gxu = full
            x._accumulate(gxu[:, :, ph0:ph0 + h, pw0:pw0 + wd])

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward, "conv2d")


def max_pool2d(x, kernel, stride=(1, 1), padding="valid"):
    """Max pooling over x[N,C,H,W]; same-padding uses -inf fill."""
    x = _as_tensor(x)
    kh, kw = kernel
    sh, sw = stride
    n, c, h, wd = x.shape
    ph0, ph1 = _pad_amounts(h, kh, sh, padding)
    pw0, pw1 = _pad_amounts(wd, kw, sw, padding)
    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    view, ho, wo = _conv_view(xp, kh, kw, sh, sw)
    flat = view.reshape(n, ho, wo, c, kh * kw)
    arg = flat.argmax(axis=-1)
    out_data = np.ascontiguousarray(
        np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0].transpose(0, 3, 1, 2))

    def backward(g):
        if not x.requires_grad:
            return
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        nn, hh, ww, cc = np.indices(arg.shape, sparse=False)
        ih, iw = np.unravel_index(arg, (kh, kw))
        np.add.at(gxp, (nn, cc, hh * sh + ih, ww * sw + iw), g.transpose(0, 2, 3, 1))
        x._accumulate(gxp[:, :, ph0:ph0 + h, pw0:pw0 + wd])

    return _make(out_data, (x,), backward, "max_pool2d")


# -- verification ------------------------------------------------------------------

def grad_check(f, x, eps=1e-6):
    """Max relative error between recorded and central-difference gradients.

    f must map a Tensor to a scalar Tensor. Run at float64: the comparison
    bound in the test suite (1e-4) is not reachable at float32.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x0 = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                requires_grad=True)
    y = f(x0)
    if y.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
    y.backward()
    analytic = x0.grad.copy() if x0.grad is not None else np.zeros_like(x0.data)

    numeric = np.zeros_like(x0.data)
    flat = x0.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(x0.data, dtype=np.float64)).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(x0.data, dtype=np.float64)).data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
