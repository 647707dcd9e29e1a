"""Reverse-mode differentiable tensor engine.

Every operation records its inputs together with a vector-Jacobian closure
written in terms of other tensor operations.  Because the backward pass is
itself built from differentiable primitives, gradients returned by
``backward(..., create_graph=True)`` can be differentiated again, which is
what the reconstruction loss needs (the attack differentiates a function of
weight gradients with respect to the candidate image).

All data is float64.  Non-finite values are trapped eagerly at every op
boundary and raised as :class:`NumericsError`.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NumericsError(ArithmeticError):
    """An operation produced NaN or Inf (or hit a degenerate value)."""


class GraphError(RuntimeError):
    """Backward was asked something the computation graph cannot answer."""


_grad_enabled = True


class no_grad:
    """Context manager: ops executed inside do not record the graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-dimensional float64 array with optional derivative tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "leaf")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False):
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    def detach(self):
        """Copy of this tensor cut loose from any graph."""
        return Tensor(self.data.copy())

    # -- inspection -----------------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"

    # -- operator sugar ---------------------------------------------------

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def sqrt(self):
        return tsqrt(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op):
    """Build a graph node. ``parents`` is a list of (tensor, vjp) pairs."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled:
        live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
    else:
        live = ()
    out._parents = live
    out.requires_grad = bool(live)
    return out


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape`` (differentiably)."""
    while g.ndim > len(shape):
        g = tsum(g, axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = tsum(g, axis=i, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, tuple(shape))
    return g


# -- elementwise arithmetic -----------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _node(data, [(a, lambda g: _sum_to(g, a.shape)),
                        (b, lambda g: _sum_to(g, b.shape))], "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _node(data, [(a, lambda g: _sum_to(g, a.shape)),
                        (b, lambda g: _sum_to(neg(g), b.shape))], "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _node(data, [(a, lambda g: _sum_to(mul(g, b), a.shape)),
                        (b, lambda g: _sum_to(mul(g, a), b.shape))], "mul")


def div(a, b):
    return mul(as_tensor(a), power(as_tensor(b), -1.0))


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, [(a, lambda g: neg(g))], "neg")


def power(a, exponent):
    """Elementwise power with a constant (non-tensor) exponent."""
    a = as_tensor(a)
    c = float(exponent)
    data = a.data ** c
    return _node(data, [(a, lambda g: mul(g, mul(power(a, c - 1.0), c)))], "power")


def texp(a):
    a = as_tensor(a)
    out = _node(np.exp(a.data), [], "exp")
    if _grad_enabled and a.requires_grad:
        out._parents = ((a, lambda g: mul(g, out)),)
        out.requires_grad = True
    return out


def tlog(a):
    a = as_tensor(a)
    return _node(np.log(a.data), [(a, lambda g: mul(g, power(a, -1.0)))], "log")


def tsqrt(a):
    return power(a, 0.5)


def relu(a):
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _node(np.maximum(a.data, 0.0), [(a, lambda g: mul(g, mask))], "relu")


def sigmoid(a):
    a = as_tensor(a)
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)
    out = _node(data, [], "sigmoid")
    if _grad_enabled and a.requires_grad:
        out._parents = ((a, lambda g: mul(g, mul(out, sub(1.0, out)))),)
        out.requires_grad = True
    return out


def silu(a):
    """x * sigmoid(x), a smooth relu stand-in."""
    a = as_tensor(a)
    return mul(a, sigmoid(a))


# -- reductions -------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kept = (1,) * a.ndim
    else:
        axes = {ax % a.ndim for ax in (axis if isinstance(axis, tuple) else (axis,))}
        kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def vjp(g):
        if g.shape != kept:
            g = reshape(g, kept)
        return mul(g, Tensor(np.ones(a.shape)))

    return _node(data, [(a, vjp)], "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def detached_max(a, axis=None, keepdims=False):
    """Max as a plain constant (no gradient path); used as a shift in logsumexp."""
    a = as_tensor(a)
    return Tensor(a.data.max(axis=axis, keepdims=keepdims))


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if np.prod(shape if shape else (1,)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    old = a.shape
    return _node(a.data.reshape(shape), [(a, lambda g: reshape(g, old))], "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _node(np.transpose(a.data, axes),
                 [(a, lambda g: transpose(g, inv))], "transpose")


def crop2d(a, r0, r1, c0, c1):
    """Slice the two trailing axes to [r0:r1, c0:c1]."""
    a = as_tensor(a)
    data = a.data[..., r0:r1, c0:c1]
    shape = a.shape

    def vjp(g):
        return pad_insert2d(g, shape, r0, c0)

    return _node(data, [(a, vjp)], "crop2d")


def pad_insert2d(a, full_shape, r0, c0):
    """Embed into zeros of ``full_shape`` at trailing-axes offset (r0, c0)."""
    a = as_tensor(a)
    full_shape = tuple(full_shape)
    if a.shape[:-2] != full_shape[:-2]:
        raise ShapeError(f"leading dims {a.shape} vs {full_shape}")
    data = np.zeros(full_shape)
    h, w = a.shape[-2], a.shape[-1]
    data[..., r0:r0 + h, c0:c0 + w] = a.data

    def vjp(g):
        return crop2d(g, r0, r0 + h, c0, c0 + w)

    return _node(data, [(a, vjp)], "pad_insert2d")


# -- matmul -------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def swap(t):
        axes = list(range(t.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(t, axes)

    return _node(data,
                 [(a, lambda g: _sum_to(matmul(g, swap(b)), a.shape)),
                  (b, lambda g: _sum_to(matmul(swap(a), g), b.shape))],
                 "matmul")


# -- gather / scatter over rows ------------------------------------------------


def index_rows(a, idx):
    """out[k] = a[k, idx[k]] for a 2-D tensor; idx is a constant int vector."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"index_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"index vector {idx.shape} does not match rows of {a.shape}")
    rows = np.arange(a.shape[0])
    ncols = a.shape[1]
    data = a.data[rows, idx]

    def vjp(g):
        return scatter_rows(g, idx, ncols)

    return _node(data, [(a, vjp)], "index_rows")


def scatter_rows(v, idx, ncols):
    """Adjoint of index_rows: place v[k] at column idx[k] of a zero 2-D tensor."""
    v = as_tensor(v)
    idx = np.asarray(idx, dtype=np.intp)
    if v.ndim != 1 or idx.shape != v.shape:
        raise ShapeError(f"scatter_rows needs matching 1-D value/index, got {v.shape}/{idx.shape}")
    data = np.zeros((v.shape[0], int(ncols)))
    data[np.arange(v.shape[0]), idx] = v.data

    def vjp(g):
        return index_rows(g, idx)

    return _node(data, [(v, vjp)], "scatter_rows")


# -- im2col / col2im (the conv2d workhorses, mutually adjoint) -----------------

_GEOM_CACHE = {}


def _conv_geometry(h, w, kh, kw, stride, pad):
    key = (h, w, kh, kw, stride, pad)
    geom = _GEOM_CACHE.get(key)
    if geom is None:
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"conv geometry degenerate: input {h}x{w}, kernel {kh}x{kw}, "
                             f"stride {stride}, pad {pad}")
        i0 = np.repeat(np.arange(kh), kw)
        j0 = np.tile(np.arange(kw), kh)
        i1 = stride * np.repeat(np.arange(oh), ow)
        j1 = stride * np.tile(np.arange(ow), oh)
        rows = i0[:, None] + i1[None, :]       # [kh*kw, oh*ow]
        cols = j0[:, None] + j1[None, :]
        geom = (oh, ow, rows, cols)
        _GEOM_CACHE[key] = geom
    return geom


def im2col(x, kh, kw, stride=1, pad=0):
    """Patch-extraction: [B,C,H,W] -> [B, C*kh*kw, OH*OW]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col needs a 4-D tensor, got {x.shape}")
    b, c, h, w = x.shape
    oh, ow, rows, cols = _conv_geometry(h, w, kh, kw, stride, pad)
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    patches = xp[:, :, rows, cols]                       # [B, C, kh*kw, L]
    data = patches.reshape(b, c * kh * kw, oh * ow)
    shape = x.shape

    def vjp(g):
        return col2im(g, shape, kh, kw, stride, pad)

    return _node(data, [(x, vjp)], "im2col")


def col2im(cols_t, x_shape, kh, kw, stride=1, pad=0):
    """Adjoint of im2col: scatter-add patches back into an image tensor."""
    cols_t = as_tensor(cols_t)
    b, c, h, w = x_shape
    oh, ow, rows, cols = _conv_geometry(h, w, kh, kw, stride, pad)
    if cols_t.shape != (b, c * kh * kw, oh * ow):
        raise ShapeError(f"col2im got {cols_t.shape}, expected {(b, c * kh * kw, oh * ow)}")
    patches = cols_t.data.reshape(b, c, kh * kw, oh * ow)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    bidx = np.arange(b)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]
    np.add.at(xp, (bidx, cidx, rows[None, None], cols[None, None]), patches)
    data = xp[:, :, pad:pad + h, pad:pad + w] if pad else xp

    def vjp(g):
        return im2col(g, kh, kw, stride, pad)

    return _node(data, [(cols_t, vjp)], "col2im")


# -- composite neural-net ops ---------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D convolution, NCHW layout, weight [Cout, Cin, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input/weight, got {x.shape} / {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    b = x.shape[0]
    cout, cin, kh, kw = weight.shape
    oh, ow, _, _ = _conv_geometry(x.shape[2], x.shape[3], kh, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)                      # [B, Cin*kh*kw, L]
    w2 = reshape(weight, (cout, cin * kh * kw))
    out = matmul(w2, cols)                                     # [B, Cout, L]
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (1, cout, 1)))
    return reshape(out, (b, cout, oh, ow))


def avgpool2(x):
    """Non-overlapping 2x2 average pooling."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {x.shape}")
    r = reshape(x, (b, c, h // 2, 2, w // 2, 2))
    return mul(tsum(tsum(r, axis=5), axis=3), 0.25)


def global_avgpool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool needs a 4-D tensor, got {x.shape}")
    return tmean(x, axis=(2, 3))


def softmax(logits, axis=-1):
    logits = as_tensor(logits)
    shifted = sub(logits, detached_max(logits, axis=axis, keepdims=True))
    e = texp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(logits, axis=-1):
    logits = as_tensor(logits)
    shifted = sub(logits, detached_max(logits, axis=axis, keepdims=True))
    lse = tlog(tsum(texp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def cross_entropy(logits, labels):
    """Mean cross-entropy of [B,N] logits against integer class labels."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    n = logits.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValueError(f"label out of range [0, {n}): {labels}")
    picked = index_rows(log_softmax(logits), labels)
    return neg(tmean(picked))


def l2_norm(a):
    """Frobenius norm of a tensor as a scalar tensor."""
    return tsqrt(tsum(power(as_tensor(a), 2.0)))


# -- backward ---------------------------------------------------------------


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
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents before children


def backward(scalar, wrt, create_graph=False):
    """Gradients of a scalar tensor with respect to each tensor in ``wrt``.

    Returns a dict mapping each requested tensor to its gradient tensor.
    With ``create_graph=True`` the returned gradients carry their own graph
    and can be differentiated again.
    """
    scalar = as_tensor(scalar)
    if scalar.size != 1:
        raise GraphError(f"backward needs a scalar, got shape {scalar.shape}")
    wrt = list(wrt)
    order = _toposort(scalar)
    reachable = {id(t) for t in order}
    for t in wrt:
        if id(t) not in reachable:
            raise GraphError("a requested tensor is not reachable from the loss scalar")

    def run():
        cotangent = {id(scalar): Tensor(np.ones(scalar.shape))}
        for node in reversed(order):
            g = cotangent.pop(id(node), None)
            if g is None:
                continue
            if id(node) in keep:
                results[id(node)] = g
            for parent, vjp in node._parents:
                contrib = vjp(g)
                prev = cotangent.get(id(parent))
                cotangent[id(parent)] = contrib if prev is None else add(prev, contrib)

    keep = {id(t) for t in wrt}
    results = {}
    if create_graph:
        run()
    else:
        with no_grad():
            run()
    out = {}
    for t in wrt:
        g = results.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        out[t] = g
    return out
