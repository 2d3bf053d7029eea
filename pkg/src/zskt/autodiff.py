"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is numpy under the hood. Each op builds the output tensor and,
when any input requires grad (and grad mode is on), attaches the parent
tensors plus a vector-Jacobian closure. `backward` walks the implicit graph
once in reverse topological order, so gradients are deterministic and each
node is visited exactly once.

All math runs in float64; float32 only ever appears in checkpoint storage.
"""

import contextlib
import itertools

import numpy as np

from .errors import GraphError, ShapeMismatch, UnknownOp

_grad_enabled = True
_tid_counter = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Context manager that suspends graph recording."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d float64 array, optionally tracked on the autodiff graph.

    `grad` is populated (accumulating) by `backward`. `tid` is a process-wide
    unique id used as the key of gradient maps.
    """

    __slots__ = ("data", "requires_grad", "grad", "tid", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tid = next(_tid_counter)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Same values, off the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    # -- convenience arithmetic; everything routes through the op functions --

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp):
    """Wrap op output; record parents + vjp only if the graph is live."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Sum `g` back down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: operand shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scalar_mul(a, c):
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a):
    inv = 1.0 / a.data
    return _node(inv, (a,), lambda g: (-g * inv * inv,))


def relu(a):
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    return _node(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp_min(a, floor):
    """max(a, floor); gradient passes where a >= floor."""
    floor = float(floor)
    mask = a.data >= floor
    return _node(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _node(out, (a,), vjp)


def l2_norm(a, axis=None, keepdims=False):
    """Euclidean norm over `axis`. Gradient is guarded at exactly zero."""
    axes = _axis_tuple(axis, a.data.ndim)
    norm = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        n = norm
        if not keepdims:
            g = np.expand_dims(g, axes)
            n = np.expand_dims(n, axes)
        return (g * a.data / np.maximum(n, 1e-300),)

    return _node(norm, (a,), vjp)


def reshape(a, shape):
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    base = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != base.data.ndim or any(
                i != axis and d != e for i, (d, e) in enumerate(zip(base.shape, t.shape))):
            raise ShapeMismatch(f"concat: shapes {base.shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra / conv / normalization


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def _im2col(xp, kh, kw, stride):
    # xp: padded input (N, C, H, W) -> patch matrix (N*oh*ow, C*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-d cross-correlation, NCHW layout, kernel (Cout, Cin, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: need 4-d input/kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cink, kh, kw = w.shape
    if cin != cink:
        raise ShapeMismatch(f"conv2d: input channels {cin} != kernel channels {cink}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeMismatch(f"conv2d: kernel ({kh},{kw}) larger than padded input ({h + 2 * pad},{wd + 2 * pad})")
    stride = int(stride)
    pad = int(pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data.reshape(1, cout, 1, 1)

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kh):  # col2im scatter-add, one slice per kernel offset
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, vjp)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling on the two trailing spatial axes."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"upsample-nearest-2x: need 4-d input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), vjp)


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.9, eps=1e-5):
    """Per-channel batch normalization.

    Channel axis is 1; stats reduce over every other axis. Train mode uses
    batch statistics and folds them into the running buffers in place
    (running <- momentum*running + (1-momentum)*batch, biased variance).
    Eval mode is a fixed affine map through the running buffers.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeMismatch(f"batchnorm: need 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")
    axes = tuple(i for i in range(x.data.ndim) if i != 1)
    bshape = tuple(c if i == 1 else 1 for i in range(x.data.ndim))
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.reshape(c)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.reshape(c)
        istd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * istd
        out = gam * xhat + bet
        m = x.data.size // c

        def vjp(g):
            dxhat = g * gam
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (istd / m) * (m * dxhat - s1 - xhat * s2)
            return (gx,
                    (g * xhat).sum(axis=axes),
                    g.sum(axis=axes))

    else:
        istd = (1.0 / np.sqrt(running_var + eps)).reshape(bshape)
        rm = running_mean.reshape(bshape)
        xhat = (x.data - rm) * istd
        out = gam * xhat + bet

        def vjp(g):
            return (g * gam * istd,
                    (g * xhat).sum(axis=axes),
                    g.sum(axis=axes))

    return _node(out, (x, gamma, beta), vjp)


def softmax(logits, axis=-1):
    """Row-stable softmax (max subtraction); rows sum to 1 for any finite input."""
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# dispatcher, backward, gradient checking

OP_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "exp": exp,
    "log": log,
    "square": square,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "l2-norm": l2_norm,
    "reshape": reshape,
    "concat": concat,
    "upsample-nearest-2x": upsample2x,
    "tanh": tanh,
    "batchnorm": batch_norm,
    "softmax": softmax,
}


def apply(op_kind, inputs, attrs=None):
    """Dispatch an op by kind string; `attrs` become keyword arguments."""
    try:
        fn = OP_TABLE[op_kind]
    except KeyError:
        raise UnknownOp(f"unknown op kind {op_kind!r}") from None
    attrs = dict(attrs or {})
    if op_kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(out):
    """Backprop from a scalar; returns {tensor.tid: gradient array}.

    Accumulates into each reachable requires-grad tensor's `.grad` as well.
    Two calls on the same graph return bit-identical maps.
    """
    if not isinstance(out, Tensor):
        raise GraphError("backward: output is not a Tensor")
    if out.data.size != 1:
        raise GraphError(f"backward: output must be scalar, got shape {out.shape}")
    if not out.requires_grad:
        raise GraphError("backward: tensor is detached from any live graph")

    adjoint = {id(out): np.ones_like(out.data)}
    grads = {}
    for node in reversed(_toposort(out)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
            grads[node.tid] = g.copy()
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            acc = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if acc is None else acc + pg
    return grads


def finite_difference_check(fn, point, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `fn` must map a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    leaf = Tensor(point.data if isinstance(point, Tensor) else point, requires_grad=True)
    out = fn(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise GraphError("finite_difference_check: fn must return a scalar Tensor")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    worst = 0.0
    flat = leaf.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            hi = float(fn(leaf).data)
            flat[i] = orig - h
            lo = float(fn(leaf).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
