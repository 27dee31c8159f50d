"""Minimal reverse-mode differentiation over dense numpy arrays.

Values are stored as float32 by default (float64 inputs are kept as
float64, which is how the verification tests run the same code paths at
full precision). Reductions accumulate in float64 before casting back.
Broadcasting is deliberately restricted to bias-add over the leading
axis; everything else requires exact shape matches.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional record of how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")
    _counter = itertools.count()

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._id = next(Tensor._counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _cast(g, like):
    return g.astype(like.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        out = a.data + b.data

        def backward(g):
            return g, g

        return _make(out, (a, b), backward)
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        # bias add broadcast over the leading axis
        out = a.data + b.data

        def backward(g):
            return g, _cast(g.sum(axis=0, dtype=np.float64), b)

        return _make(out, (a, b), backward)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    out = a.data * s

    def backward(g):
        return (g * s,)

    return _make(out, (a,), backward)


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def backward(g):
        return g * b.data, g * a.data

    return _make(out, (a, b), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward)


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    out = a.data.T.copy()

    def backward(g):
        return (g.T,)

    return _make(out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        grads = []
        start = 0
        for size in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            grads.append(g[tuple(sl)])
            start += size
        return tuple(grads)

    return _make(out, tensors, backward)


def narrow(a, axis, start, stop):
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(f"narrow: bad range [{start},{stop}) on axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    out = a.data[tuple(sl)].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[tuple(sl)] = g
        return (full,)

    return _make(out, (a,), backward)


def tsum(a, axis=None):
    a = _as_tensor(a)
    out = _cast(a.data.sum(axis=axis, dtype=np.float64), a)
    if axis is None:
        out = out.reshape(())

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=False).copy(),)

    return _make(out, (a,), backward)


def tmean(a, axis=None):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0)

    def backward(g):
        return (g * mask,)

    return _make(out, (a,), backward)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def log(a):
    a = _as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), backward)


def softmax(a):
    """Row softmax of a 2-D tensor, max-stabilized."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax: expected 2-D, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True, dtype=np.float64).astype(a.dtype)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True, dtype=np.float64).astype(a.dtype)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


def l2_normalize(a, eps=1e-12):
    """Row-wise unit normalization of a 2-D tensor."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"l2_normalize: expected 2-D, got {a.shape}")
    norm = np.sqrt((a.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True)).astype(a.dtype)
    denom = norm + eps
    out = a.data / denom

    def backward(g):
        dot = (g * a.data).sum(axis=1, keepdims=True, dtype=np.float64).astype(a.dtype)
        safe = np.maximum(norm, eps)
        return (g / denom - a.data * (dot / (safe * denom * denom)),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# convolution / pooling (NCHW layout)


def _im2col(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (b, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    return np.ascontiguousarray(view).reshape(b, c * kh * kw, oh * ow), oh, ow


def _col2im(gcols, xshape, kh, kw, stride, pad, oh, ow):
    b, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    gx = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
    gcols = gcols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
    if pad:
        gx = gx[:, :, pad : pad + h, pad : pad + w]
    return gx


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D convolution: x (B,C,H,W), w (F,C,kh,kw), optional bias (F,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    f, c, kh, kw = w.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(f, -1)
    out = np.matmul(wmat, cols).reshape(x.shape[0], f, oh, ow)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({f},)")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape(g.shape[0], f, oh * ow))
        gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gw = gw.astype(w.dtype, copy=False)
        gcols = np.matmul(wmat.T, gf)
        gx = _col2im(gcols, x.shape, kh, kw, stride, pad, oh, ow).astype(x.dtype, copy=False)
        if b is not None:
            gb = _cast(gf.sum(axis=(0, 2), dtype=np.float64), b)
            return gx, gw, gb
        return gx, gw

    return _make(out.astype(x.dtype, copy=False), parents, backward)


def maxpool2d(x, k=2):
    """Non-overlapping k x k max pooling; H and W must be divisible by k."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: {h}x{w} not divisible by {k}")
    oh, ow = h // k, w // k
    windows = x.data.reshape(b, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, k * k)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((b, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return _make(out, (x,), backward)


def avgpool2d(x, k=2):
    """Non-overlapping k x k mean pooling; H and W must be divisible by k."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: {h}x{w} not divisible by {k}")
    oh, ow = h // k, w // k
    out = _cast(x.data.reshape(b, c, oh, k, ow, k).mean(axis=(3, 5), dtype=np.float64), x)

    def backward(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (b, c, oh, k, ow, k))
        return (gx.reshape(b, c, h, w).astype(x.dtype, copy=False).copy(),)

    return _make(out, (x,), backward)


def global_avg_pool(x):
    """(B,C,H,W) -> (B,C) spatial mean."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D, got {x.shape}")
    b, c, h, w = x.shape
    out = _cast(x.data.mean(axis=(2, 3), dtype=np.float64), x)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype, copy=False).copy(),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Populate .grad on every requires_grad leaf reachable from `loss`."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node._id in visited:
            continue
        visited.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._id not in visited:
                stack.append((p, False))

    grads = {loss._id: np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f, params, h=1e-3, max_coords=None, seed=0):
    """Compare analytic gradients of f(params) against central differences.

    f must be a deterministic zero-argument callable returning a scalar
    Tensor built from `params`. Returns the max relative error over all
    (or `max_coords` sampled) coordinates, with denominator
    max(|analytic|, |numeric|, 1e-6).
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = []
    for pi, p in enumerate(params):
        for ci in range(p.data.size):
            coords.append((pi, ci))
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picked]

    max_rel = 0.0
    with no_grad():
        for pi, ci in coords:
            flat = params[pi].data.reshape(-1)
            orig = flat[ci]
            flat[ci] = orig + h
            f_plus = float(f().data)
            flat[ci] = orig - h
            f_minus = float(f().data)
            flat[ci] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[pi].reshape(-1)[ci])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            max_rel = max(max_rel, rel)
    return max_rel
