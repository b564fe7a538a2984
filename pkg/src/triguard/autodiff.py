"""Dense tensors with reverse-mode automatic differentiation.

Every vector-Jacobian product is written in terms of differentiable ops, so
gradients computed with ``create_graph=True`` are themselves part of a graph
and can be differentiated again (double backprop).

ReLU uses the subgradient 0 at 0 and has zero second derivative everywhere.
"""

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, NonFiniteError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that disables graph recording."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


def _as_float_array(data, dtype=None):
    if dtype is not None:
        return np.array(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return np.array(data)
    return np.array(data, dtype=np.float64)


class Tensor:
    """Immutable n-d float array that may carry a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = _as_float_array(data, dtype)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed from non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return _make(self.data, "detach", ())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self, delta=None):
        return log(self, delta)

    def abs(self):
        return absolute(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def backward(self, create_graph=False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if self.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        grads = _backprop(self, create_graph)
        for node in _toposort(self):
            if node.is_leaf and node.requires_grad and id(node) in grads:
                g = grads[id(node)]
                node.grad = g if node.grad is None else add(node.grad, g)


def _make(arr, op, parents):
    """Wrap an op result; `parents` pairs each input with its VJP closure."""
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    if arr.flags.writeable:
        arr.flags.writeable = False
    t.data = arr
    t.grad = None
    t.op = op
    live = tuple((p, fn) for p, fn in parents if p.requires_grad) if is_grad_enabled() else ()
    t._parents = live
    t.requires_grad = bool(live)
    return t


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def _broadcast_shape(sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"shapes {sa} and {sb} do not broadcast") from None


# -- shape plumbing -------------------------------------------------------
def sum_to(t, shape):
    """Sum a broadcast tensor back down to `shape` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if t.shape == shape:
        return t
    lead = t.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and t.shape[lead + i] != 1
    )
    out = t.data.sum(axis=axes, keepdims=True).reshape(shape)
    src = t.shape
    return _make(out, "sum_to", [(t, lambda g: broadcast_to(g, src))])


def broadcast_to(t, shape):
    shape = tuple(shape)
    if t.shape == shape:
        return t
    try:
        out = np.broadcast_to(t.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {t.shape} to {shape}") from None
    src = t.shape
    return _make(out, "broadcast_to", [(t, lambda g: sum_to(g, src))])


def reshape(t, shape):
    shape = tuple(shape)
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {t.shape} to {shape}") from None
    src = t.shape
    return _make(out, "reshape", [(t, lambda g: reshape(g, src))])


def transpose(t, axes=None):
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(t.data.transpose(axes), "transpose", [(t, lambda g: transpose(g, inv))])


def index(t, idx):
    src = t.shape
    return _make(np.array(t.data[idx]), "index", [(t, lambda g: _scatter(g, idx, src))])


def _scatter(g, idx, shape):
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, idx, g.data)
    return _make(out, "scatter", [(g, lambda h: index(h, idx))])


# -- elementwise arithmetic ----------------------------------------------
def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add",
                 [(a, lambda g: sum_to(g, sa)), (b, lambda g: sum_to(g, sb))])


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub",
                 [(a, lambda g: sum_to(g, sa)), (b, lambda g: sum_to(neg(g), sb))])


def neg(a):
    return _make(-a.data, "neg", [(a, neg)])


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data * b.data, "mul",
                 [(a, lambda g: sum_to(mul(g, b), a.shape)),
                  (b, lambda g: sum_to(mul(g, a), b.shape))])


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    if (b.data == 0).any():
        raise DomainError("division by zero")
    return _make(a.data / b.data, "div",
                 [(a, lambda g: sum_to(div(g, b), a.shape)),
                  (b, lambda g: sum_to(neg(div(mul(g, a), mul(b, b))), b.shape))])


def power(a, p):
    p = float(p)
    if p == 1.0:
        return a
    return _make(a.data ** p, "pow",
                 [(a, lambda g: mul(g, mul(power(a, p - 1.0), p)))])


def _const_like(arr, t):
    return Tensor(arr, dtype=t.dtype)


def relu(a):
    return _make(np.maximum(a.data, 0), "relu",
                 [(a, lambda g: mul(g, _const_like(a.data > 0, a)))])


def exp(a):
    return _make(np.exp(a.data), "exp", [(a, lambda g: mul(g, exp(a)))])


def log(a, delta=None):
    """Natural log; `delta` is an additive guard, ln(a + delta)."""
    shifted = a.data if delta is None else a.data + delta
    if (shifted <= 0).any():
        raise DomainError("log of nonpositive argument" +
                          ("" if delta is None else f" (delta={delta})"))
    guarded = a if delta is None else None

    def vjp(g):
        return div(g, guarded if guarded is not None else add(a, delta))

    return _make(np.log(shifted), "log", [(a, vjp)])


def absolute(a):
    sign = _const_like(np.sign(a.data), a)
    return _make(np.abs(a.data), "abs", [(a, lambda g: mul(g, sign))])


def clamp(a, lo=None, hi=None):
    keep = np.ones(a.shape, dtype=bool)
    if lo is not None:
        keep &= a.data >= lo
    if hi is not None:
        keep &= a.data <= hi
    mask = _const_like(keep, a)
    return _make(np.clip(a.data, lo, hi), "clamp", [(a, lambda g: mul(g, mask))])


def sign(a):
    """Elementwise sign; not differentiable (returned as a constant)."""
    return Tensor(np.sign(a.data), dtype=a.dtype)


# -- reductions -----------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def reduce_sum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    kshape = _keep_shape(a.shape, axes)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), "sum",
                 [(a, lambda g: broadcast_to(reshape(g, kshape), src))])


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; tied maxima share the gradient equally."""
    axes = _norm_axes(axis, a.ndim)
    kshape = _keep_shape(a.shape, axes)
    top = a.data.max(axis=axes, keepdims=True)
    hit = (a.data == top).astype(a.dtype)
    mask = _const_like(hit / hit.sum(axis=axes, keepdims=True), a)
    src = a.shape
    out = top if keepdims else top.reshape([s for i, s in enumerate(a.shape) if i not in axes])
    return _make(np.array(out), "max",
                 [(a, lambda g: mul(broadcast_to(reshape(g, kshape), src), mask))])


def softmax(a, axis=-1):
    shift = Tensor(a.data.max(axis=axis, keepdims=True), dtype=a.dtype)
    e = exp(sub(a, shift))
    return div(e, reduce_sum(e, axis, keepdims=True))


def log_softmax(a, axis=-1):
    shift = Tensor(a.data.max(axis=axis, keepdims=True), dtype=a.dtype)
    z = sub(a, shift)
    return sub(z, log(reduce_sum(exp(z), axis, keepdims=True)))


def one_hot(labels, k, dtype=np.float64):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return Tensor(out)


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy of (N, k) logits against integer labels."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, k) logits, got {logits.shape}")
    hot = one_hot(labels, logits.shape[1], logits.dtype)
    per = neg(reduce_sum(mul(log_softmax(logits, 1), hot), axis=1))
    if reduction == "none":
        return per
    if reduction == "sum":
        return reduce_sum(per)
    return mean(per)


# -- linear algebra -------------------------------------------------------
def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, "matmul",
                 [(a, lambda g: matmul(g, transpose(b))),
                  (b, lambda g: matmul(transpose(a), g))])


def linear(x, weight, bias=None):
    """x @ weight.T + bias, with weight stored (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def im2col_array(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"kernel {kh}x{kw} does not fit input {h}x{w} (padding {padding})")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def col2im_array(cols, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out)


def im2col(x, kh, kw, stride=1, padding=0):
    """Unfold (N, C, H, W) into (N*OH*OW, C*kh*kw) patch rows."""
    shape = x.shape
    return _make(im2col_array(x.data, kh, kw, stride, padding), "im2col",
                 [(x, lambda g: col2im(g, shape, kh, kw, stride, padding))])


def col2im(cols, x_shape, kh, kw, stride=1, padding=0):
    """Adjoint of im2col: scatter-add patch rows back into an image."""
    return _make(col2im_array(cols.data, x_shape, kh, kw, stride, padding), "col2im",
                 [(cols, lambda g: im2col(g, kh, kw, stride, padding))])


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (N, C, H, W) or (C, H, W) input with (O, C, kh, kw) weights."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {wc}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = matmul(cols, transpose(reshape(weight, (o, c * kh * kw))))
    out = transpose(reshape(out, (n, oh, ow, o)), (0, 3, 1, 2))
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (o, 1, 1)))
    if single:
        out = reshape(out, out.shape[1:])
    return out


def avg_pool_array(x, size):
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    x = x[:, :, : oh * size, : ow * size]
    return x.reshape(n, c, oh, size, ow, size).mean(axis=(3, 5))


def avg_unpool_array(g, size, x_shape):
    n, c, h, w = x_shape
    oh, ow = g.shape[2], g.shape[3]
    up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
    out = np.zeros(x_shape, dtype=g.dtype)
    out[:, :, : oh * size, : ow * size] = up
    return out


def avg_pool2d(x, size):
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    if x.shape[2] < size or x.shape[3] < size:
        raise DimensionError(f"pool size {size} exceeds spatial dims {x.shape[2:]}")
    shape = x.shape
    return _make(avg_pool_array(x.data, size), "avg_pool",
                 [(x, lambda g: avg_unpool(g, size, shape))])


def avg_unpool(g, size, x_shape):
    """Adjoint of avg_pool2d."""
    return _make(avg_unpool_array(g.data, size, x_shape), "avg_unpool",
                 [(g, lambda h: avg_pool2d(h, size))])


# -- backpropagation ------------------------------------------------------
def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _backprop(root, create_graph, targets=None):
    order = _toposort(root)
    needed = None
    if targets is not None:
        # restrict to nodes with a path to some target
        needed = set(targets)
        for node in order:
            if any(id(p) in needed for p, _ in node._parents):
                needed.add(id(node))
    seed = Tensor(np.ones(root.shape, dtype=root.dtype))
    grads = {id(root): seed}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._parents:
                if needed is not None and id(parent) not in needed:
                    continue
                pg = vjp(g)
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"internal: {node.op} vjp gave {pg.shape} for parent {parent.shape}")
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return grads


def grad(output, inputs, create_graph=False):
    """Gradients of a scalar `output` with respect to each tensor in `inputs`.

    With ``create_graph=True`` the returned tensors are differentiable.
    Inputs that `output` does not depend on receive zeros.
    """
    if output.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    single = isinstance(inputs, Tensor)
    seq = [inputs] if single else list(inputs)
    grads = _backprop(output, create_graph, {id(t) for t in seq}) if output.requires_grad else {}
    out = [grads.get(id(t), Tensor(np.zeros(t.shape, dtype=t.dtype))) for t in seq]
    return out[0] if single else out
