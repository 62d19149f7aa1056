"""Dense tensors with reverse-mode autodiff.

Every operation records a vector-Jacobian rule expressed in terms of the
engine's own ops, so a backward pass produces nodes that can themselves be
differentiated (grad-of-grad, needed for second-order meta-gradients through
unrolled inner loops).

Default numeric width is float32; pass float64 arrays for verification work.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are structurally incompatible."""


class NumericError(FloatingPointError):
    """An op received or produced non-finite values."""


class GraphError(RuntimeError):
    """Invalid use of the autodiff graph (non-scalar output, missing graph)."""


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled():
    return _GRAD_ENABLED[-1]


class Tensor:
    """A numpy array plus the graph edge that produced it."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- introspection ----------------------------------------------------

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

    def item(self):
        return self.data.item()

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _lift(x, dtype=DEFAULT_DTYPE):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjp):
    """Create a result node, recording the edge only when grad is on."""
    out = Tensor.__new__(Tensor)
    out.data = data
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _const(data):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t._parents = ()
    t._vjp = None
    return t


def _check_finite(x, op):
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{op}: non-finite input")


# -- broadcasting helpers -------------------------------------------------


def _broadcast_shape(sa, sb, op):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible")


def unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to `shape` (differentiable)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


# -- primitives -----------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def neg(a):
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def vjp(g):
        return unbroadcast(mul(g, b), a.shape), unbroadcast(mul(g, a), b.shape)

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "div")

    def vjp(g):
        ga = unbroadcast(div(g, b), a.shape)
        gb = unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp)


def pow_const(a, p):
    a = _lift(a)
    p = float(p)

    def vjp(g):
        return (mul(g, mul(_const(np.asarray(p, dtype=a.dtype)), pow_const(a, p - 1.0))),)

    return _make(a.data ** p, (a,), vjp)


def exp(a):
    a = _lift(a)
    _check_finite(a, "exp")
    out = _make(np.exp(a.data), (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    a = _lift(a)
    _check_finite(a, "log")
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a):
    a = _lift(a)
    out = _make(np.sqrt(a.data), (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (div(g, mul(_const(np.asarray(2.0, dtype=a.dtype)), out)),)
    return out


def relu(a):
    a = _lift(a)
    mask = _const(a.data > 0)
    return _make(np.maximum(a.data, 0), (a,), lambda g: (mul(g, mask),))


def clip_min(a, lo):
    """max(a, lo) with lo a constant; gradient passes where a > lo."""
    a = _lift(a)
    mask = _const(a.data > lo)
    return _make(np.maximum(a.data, lo), (a,), lambda g: (mul(g, mask),))


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")

    def vjp(g):
        ga = unbroadcast(matmul(g, swap_last(b)), a.shape)
        gb = unbroadcast(matmul(swap_last(a), g), b.shape)
        return ga, gb

    return _make(np.matmul(_mm_operand(a.data), _mm_operand(b.data)), (a, b), vjp)


def _mm_operand(x):
    # np.matmul hits a slow non-BLAS path when a batched operand's matrix
    # axes are not its fastest-varying ones (e.g. batch-innermost views);
    # a contiguous copy is far cheaper in that case
    if x.ndim <= 2 or x.flags.c_contiguous:
        return x
    if x.strides[-1] <= x.strides[-2] <= min(x.strides[:-2], default=x.strides[-2]):
        return x
    return np.ascontiguousarray(x)


def swap_last(a):
    a = _lift(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        ax = tuple(range(a.ndim))
    elif isinstance(axis, int):
        ax = (axis % a.ndim,)
    else:
        ax = tuple(x % a.ndim for x in axis)

    def vjp(g):
        if not keepdims:
            kshape = tuple(1 if i in ax else s for i, s in enumerate(a.shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, a.shape),)

    return _make(np.sum(a.data, axis=ax, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = 1
        for x in axis:
            n *= a.shape[x]
    return mul(sum_(a, axis=axis, keepdims=keepdims), _const(np.asarray(1.0 / n, dtype=a.dtype)))


def max_reduce(a, axis, keepdims=False):
    """Max along an axis; ties split the gradient evenly."""
    a = _lift(a)
    ax = axis % a.ndim
    mx = np.max(a.data, axis=ax, keepdims=True)
    mask = (a.data == mx).astype(a.dtype)
    mask /= np.sum(mask, axis=ax, keepdims=True)
    mask = _const(mask)
    out = mx if keepdims else np.squeeze(mx, axis=ax)

    def vjp(g):
        if not keepdims:
            kshape = tuple(1 if i == ax else s for i, s in enumerate(a.shape))
            g = reshape(g, kshape)
        return (mul(broadcast_to(g, a.shape), mask),)

    return _make(out, (a,), vjp)


def broadcast_to(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)
    return _make(data, (a,), lambda g: (unbroadcast(g, a.shape),))


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    orig = a.shape
    return _make(np.reshape(a.data, shape), (a,), lambda g: (reshape(g, orig),))


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(x % a.ndim for x in axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def getitem(a, key):
    """Basic slicing/integer indexing; gradient scatters back into zeros."""
    a = _lift(a)
    orig = a.shape
    return _make(a.data[key], (a,), lambda g: (scatter(g, key, orig),))


def scatter(g, key, shape):
    """Place `g` at `key` inside a zero tensor of `shape` (adjoint of getitem)."""
    g = _lift(g)
    data = np.zeros(shape, dtype=g.dtype)
    data[key] = g.data
    return _make(data, (g,), lambda gg: (getitem(gg, key),))


def concat(parts, axis=0):
    parts = [_lift(p) for p in parts]
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    offs = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        outs = []
        for i in range(len(parts)):
            key = tuple(
                slice(offs[i], offs[i + 1]) if d == ax else slice(None)
                for d in range(g.ndim)
            )
            outs.append(getitem(g, key))
        return tuple(outs)

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), vjp)


# -- im2col / col2im (linear adjoint pair, used by conv2d) ----------------


def _col_indices(c, h, w, kh, kw, stride):
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    i0 = np.repeat(np.arange(kh), kw)
    i0 = np.tile(i0, c)
    i1 = stride * np.repeat(np.arange(oh), ow)
    j0 = np.tile(np.arange(kw), kh * c)
    j1 = stride * np.tile(np.arange(ow), oh)
    ii = i0.reshape(-1, 1) + i1.reshape(1, -1)
    jj = j0.reshape(-1, 1) + j1.reshape(1, -1)
    kk = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    return kk, ii, jj, oh, ow


def im2col(x, kh, kw, stride=1):
    """(B,C,H,W) -> (B, C*kh*kw, oh*ow) patch matrix."""
    x = _lift(x)
    b, c, h, w = x.shape
    if h < kh or w < kw:
        raise ShapeError(f"im2col: input {x.shape} smaller than kernel {(kh, kw)}")
    kk, ii, jj, oh, ow = _col_indices(c, h, w, kh, kw, stride)
    data = x.data[:, kk, ii, jj]
    return _make(data, (x,), lambda g: (col2im(g, (b, c, h, w), kh, kw, stride),))


def col2im(cols, x_shape, kh, kw, stride=1):
    """Adjoint of im2col: scatter-add patches back to (B,C,H,W)."""
    cols = _lift(cols)
    b, c, h, w = x_shape
    kk, ii, jj, _, _ = _col_indices(c, h, w, kh, kw, stride)
    data = np.zeros(x_shape, dtype=cols.dtype)
    np.add.at(data, (slice(None), kk, ii, jj), cols.data)
    return _make(data, (cols,), lambda g: (im2col(g, kh, kw, stride),))


def pad2d(x, pad):
    """Zero-pad the last two axes by `pad` on each side."""
    x = _lift(x)
    if pad == 0:
        return x
    b, c, h, w = x.shape
    key = (slice(None), slice(None), slice(pad, pad + h), slice(pad, pad + w))
    return scatter(x, key, (b, c, h + 2 * pad, w + 2 * pad))


# -- composites -----------------------------------------------------------


def softmax(a, axis=-1):
    a = _lift(a)
    _check_finite(a, "softmax")
    shift = _const(np.max(a.data, axis=axis, keepdims=True))
    e = exp(add(a, neg(shift)))
    return div(e, sum_(e, axis=axis, keepdims=True))


def log_softmax(a, axis=-1):
    a = _lift(a)
    _check_finite(a, "log_softmax")
    shift = _const(np.max(a.data, axis=axis, keepdims=True))
    z = add(a, neg(shift))
    return add(z, neg(log(sum_(exp(z), axis=axis, keepdims=True))))


def cross_entropy(logits, onehot):
    """Mean negative log-likelihood; `onehot` is a constant (batch, K) matrix."""
    onehot = _lift(onehot)
    lp = log_softmax(logits, axis=-1)
    per = neg(sum_(mul(lp, onehot), axis=-1))
    return mean(per)


def batch_norm(x, gamma, beta, eps=1e-5):
    """Normalize over all axes except channel (axis 1) with current-batch stats."""
    x = _lift(x)
    axes = tuple(i for i in range(x.ndim) if i != 1)
    mu = mean(x, axis=axes, keepdims=True)
    xc = add(x, neg(mu))
    var = mean(mul(xc, xc), axis=axes, keepdims=True)
    inv = div(_const(np.asarray(1.0, dtype=x.dtype)), sqrt(add(var, _const(np.asarray(eps, dtype=x.dtype)))))
    shape = tuple(-1 if i == 1 else 1 for i in range(x.ndim))
    return add(mul(mul(xc, inv), reshape(gamma, shape)), reshape(beta, shape))


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D convolution (cross-correlation), x:(B,Cin,H,W), w:(Cout,Cin,kh,kw)."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    xp = pad2d(x, pad)
    bsz, c, h, wd = xp.shape
    co, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    cols = im2col(xp, kh, kw, stride)               # (B, C*kh*kw, oh*ow)
    wmat = reshape(w, (1, co, c * kh * kw))
    out = matmul(wmat, cols)                        # (B, Cout, oh*ow)
    if b is not None:
        out = add(out, reshape(b, (1, -1, 1)))
    return reshape(out, (bsz, co, oh, ow))


def max_pool2x2(x):
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    x = _lift(x)
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 * 2 != h or w2 * 2 != w:
        x = getitem(x, (slice(None), slice(None), slice(0, h2 * 2), slice(0, w2 * 2)))
    x = reshape(x, (b, c, h2, 2, w2, 2))
    x = max_reduce(x, axis=3)
    x = max_reduce(x, axis=4)
    return x


def squared_distance(a, b):
    """Pairwise squared euclidean distance, a:(n,d), b:(m,d) -> (n,m)."""
    a, b = _lift(a), _lift(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"squared_distance: feature dims differ {a.shape} vs {b.shape}")
    aa = sum_(mul(a, a), axis=-1, keepdims=True)           # (n,1)
    bb = reshape(sum_(mul(b, b), axis=-1), (1, -1))        # (1,m)
    ab = matmul(a, swap_last(b))                           # (n,m)
    d = add(add(aa, bb), mul(_const(np.asarray(-2.0, dtype=a.dtype)), ab))
    return clip_min(d, 0.0)


def cosine_similarity(a, b, axis=-1, eps=1e-12):
    """Cosine similarity along `axis`, norms clamped at eps."""
    a, b = _lift(a), _lift(b)
    dot = sum_(mul(a, b), axis=axis)
    na = sqrt(clip_min(sum_(mul(a, a), axis=axis), eps * eps))
    nb = sqrt(clip_min(sum_(mul(b, b), axis=axis), eps * eps))
    return div(dot, mul(na, nb))


# -- differentiation ------------------------------------------------------


def _topo(output):
    order, seen, stack = [], set(), [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def grad(output, wrt, create_graph=False, allow_unreachable=True):
    """d(output)/d(wrt) for a scalar output.

    With create_graph=True the returned tensors carry their own graph and can
    be differentiated again. Unreachable wrt entries yield zeros plus a
    warning unless allow_unreachable is False.
    """
    if output.size != 1:
        raise GraphError(f"grad: output must be scalar, got shape {output.shape}")
    if not output.requires_grad:
        raise GraphError("grad: output does not require grad")
    wrt = list(wrt)
    wrt_ids = {id(w) for w in wrt}
    order = _topo(output)
    grads = {id(output): ones(output.shape, dtype=output.dtype)}
    ctx = _NullCtx() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            nid = id(node)
            g = grads.get(nid)
            if g is None or node._vjp is None:
                continue
            if nid not in wrt_ids:
                del grads[nid]
            pgrads = node._vjp(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                cur = grads.get(id(p))
                grads[id(p)] = pg if cur is None else add(cur, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            if not allow_unreachable:
                raise GraphError("grad: a wrt tensor is unreachable from output")
            warnings.warn("grad: wrt tensor unreachable from output; returning zeros")
            g = zeros(w.shape, dtype=w.dtype)
        out.append(g)
    return out


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
