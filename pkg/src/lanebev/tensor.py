"""Minimal dense tensor type with tape-based reverse-mode autodiff.

Everything in the pipeline (convolutions, attention, bilinear sampling,
losses) is built from the operations in this module.  Data lives in numpy
arrays; an explicit :class:`Tape` records backward rules per forward pass,
so there is no implicit global graph.

Conventions:
  * default scalar type is float64 (switchable via :func:`set_default_dtype`)
  * gradients accumulate into ``Tensor.grad`` buffers during ``tape.backward``
  * tensors are immutable after creation except for gradient accumulation
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shapes passed to an operation are incompatible."""


class TapeError(RuntimeError):
    """Tape misuse: repeated backward, mixed tapes, non-scalar loss."""


_DEFAULT_DTYPE = np.float64
_DEBUG_CHECKS = False


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


def set_debug_checks(enabled: bool):
    """When enabled, every tensor creation asserts all scalars are finite."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False, tape=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite value in tensor")

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
        return float(self.data.reshape(()))

    def detach(self):
        """Copy of the value as an untracked leaf."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic; every path goes through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of operations for one forward pass.

    Backward visits each recorded operation exactly once, in reverse
    creation order.  A tape can be consumed by ``backward`` only once.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def leaf(self, data, requires_grad=True):
        """Create a leaf tensor attached to this tape."""
        return Tensor(data, requires_grad=requires_grad, tape=self)

    def watch(self, t: Tensor):
        if t.tape is not None and t.tape is not self:
            raise TapeError("tensor already belongs to another tape")
        t.tape = self
        t.requires_grad = True
        return t

    @property
    def num_ops(self):
        return len(self._records)

    def _record(self, backward_fn):
        self._records.append(backward_fn)

    def backward(self, loss: Tensor):
        if self._consumed:
            raise TapeError("tape already consumed; build a new tape per forward pass")
        if loss.tape is not self:
            raise TapeError("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError("operation mixes tensors from different tapes")
    return tape


def _make_out(data, inputs):
    tape = _tape_of(*inputs)
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked, tape=tape if tracked else None)
    return out, (tape if tracked else None)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        g = np.asarray(g, dtype=t.data.dtype)
        t.grad = np.broadcast_to(g, t.data.shape).copy() \
            if g.shape != t.data.shape else g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to the given broadcast-source shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out, tape = _make_out(a.data + b.data, (a, b))
    if tape:
        def backward():
            if out.grad is None:
                return
            _accumulate(a, _unbroadcast(out.grad, a.data.shape))
            _accumulate(b, _unbroadcast(out.grad, b.data.shape))
        tape._record(backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out, tape = _make_out(a.data - b.data, (a, b))
    if tape:
        def backward():
            if out.grad is None:
                return
            _accumulate(a, _unbroadcast(out.grad, a.data.shape))
            _accumulate(b, _unbroadcast(-out.grad, b.data.shape))
        tape._record(backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out, tape = _make_out(a.data * b.data, (a, b))
    if tape:
        def backward():
            if out.grad is None:
                return
            _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))
        tape._record(backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out, tape = _make_out(a.data / b.data, (a, b))
    if tape:
        def backward():
            if out.grad is None:
                return
            _accumulate(a, _unbroadcast(out.grad / b.data, a.data.shape))
            _accumulate(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))
        tape._record(backward)
    return out


def relu(x: Tensor) -> Tensor:
    out, tape = _make_out(np.maximum(x.data, 0.0), (x,))
    if tape:
        mask = x.data > 0.0
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * mask)
        tape._record(backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out, tape = _make_out(s, (x,))
    if tape:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * s * (1.0 - s))
        tape._record(backward)
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out, tape = _make_out(e, (x,))
    if tape:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * e)
        tape._record(backward)
    return out


def log(x: Tensor) -> Tensor:
    out, tape = _make_out(np.log(x.data), (x,))
    if tape:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad / x.data)
        tape._record(backward)
    return out


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    out, tape = _make_out(r, (x,))
    if tape:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * 0.5 / r)
        tape._record(backward)
    return out


def absolute(x: Tensor) -> Tensor:
    out, tape = _make_out(np.abs(x.data), (x,))
    if tape:
        sign = np.sign(x.data)
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * sign)
        tape._record(backward)
    return out


# ---------------------------------------------------------------------------
# reductions / reshaping


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out, tape = _make_out(x.data.sum(axis=axis, keepdims=keepdims), (x,))
    if tape:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        tape._record(backward)
    return out


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / n, dtype=x.data.dtype)))


def reshape(x: Tensor, shape) -> Tensor:
    out, tape = _make_out(x.data.reshape(shape), (x,))
    if tape:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad.reshape(x.data.shape))
        tape._record(backward)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    out, tape = _make_out(x.data.transpose(axes), (x,))
    if tape:
        inv = np.argsort(axes)
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad.transpose(inv))
        tape._record(backward)
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    out, tape = _make_out(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if tape:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def backward():
            if out.grad is None:
                return
            for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
                _accumulate(t, g)
        tape._record(backward)
    return out


def stack(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out, tape = _make_out(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))
    if tape:
        def backward():
            if out.grad is None:
                return
            for i, t in enumerate(tensors):
                _accumulate(t, np.take(out.grad, i, axis=axis))
        tape._record(backward)
    return out


def getitem(x: Tensor, idx) -> Tensor:
    out, tape = _make_out(x.data[idx], (x,))
    if tape:
        def backward():
            if out.grad is None:
                return
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            _accumulate(x, g)
        tape._record(backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out, tape = _make_out(a.data @ b.data, (a, b))
    if tape:
        def backward():
            if out.grad is None:
                return
            ga = out.grad @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ out.grad
            _accumulate(a, _unbroadcast(ga, a.data.shape))
            _accumulate(b, _unbroadcast(gb, b.data.shape))
        tape._record(backward)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., d_in] @ w[d_in, d_out] + b[d_out]."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")
    y = matmul(x, w) if x.ndim >= 2 else None
    if y is None:
        raise DimensionError("linear expects at least a 2-d input")
    if b is not None:
        y = add(y, b)
    return y


def softmax(x: Tensor, axis=-1) -> Tensor:
    if x.data.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out, tape = _make_out(s, (x,))
    if tape:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))
        tape._record(backward)
    return out


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    if x.data.shape[axis] < 1:
        raise DimensionError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out, tape = _make_out(ls, (x,))
    if tape:
        p = np.exp(ls)
        def backward():
            if out.grad is None:
                return
            g = out.grad
            _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))
        tape._record(backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs feature dim {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out, tape = _make_out(xhat * gain.data + bias.data, (x, gain, bias))
    if tape:
        def backward():
            if out.grad is None:
                return
            g = out.grad
            gxhat = g * gain.data
            _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
            _accumulate(bias, _unbroadcast(g, bias.data.shape))
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gxhat - m1 - xhat * m2))
        tape._record(backward)
    return out


# ---------------------------------------------------------------------------
# convolution / pooling


def _conv_out_dim(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[(N,)C,H,W] with kernels[C_out,C_in,kh,kw]."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    nb, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {cin} vs kernels {kcin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    hout = _conv_out_dim(h, kh, stride, padding)
    wout = _conv_out_dim(w, kw, stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :hout, :wout]  # [N,C,H',W',kh,kw]
    y = np.einsum("nchwij,ocij->nohw", win, kernels.data, optimize=True)

    out_data = y[0] if squeeze else y
    out, tape = _make_out(out_data, (x, kernels))
    if tape:
        def backward():
            if out.grad is None:
                return
            g = out.grad[None] if squeeze else out.grad
            gk = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
            _accumulate(kernels, gk)
            if x.requires_grad or x.tape is not None:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        sl = np.einsum("nohw,oc->nchw", g, kernels.data[:, :, i, j], optimize=True)
                        gxp[:, :, i:i + hout * stride:stride, j:j + wout * stride:stride] += sl
                if padding:
                    gxp = gxp[:, :, padding:-padding or None, padding:-padding or None]
                _accumulate(x, gxp[0] if squeeze else gxp)
        tape._record(backward)
    return out


def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or k
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    nb, c, h, w = xd.shape
    hout = _conv_out_dim(h, k, stride, 0)
    wout = _conv_out_dim(w, k, stride, 0)
    win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :hout, :wout]
    flat = win.reshape(nb, c, hout, wout, k * k)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out, tape = _make_out(y[0] if squeeze else y, (x,))
    if tape:
        def backward():
            if out.grad is None:
                return
            g = out.grad[None] if squeeze else out.grad
            gx = np.zeros(xd.shape, dtype=g.dtype)
            ki, kj = np.divmod(arg, k)
            nn, cc, ii, jj = np.indices(arg.shape)
            np.add.at(gx, (nn, cc, ii * stride + ki, jj * stride + kj), g)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gx[0] if squeeze else gx)
        tape._record(backward)
    return out


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(value_map: Tensor, points: Tensor) -> Tensor:
    """Sample value_map[C,H,W] at normalized points[N,2] = (u,v) in [0,1]^2.

    Align-corners-false: pixel (r, c) center sits at u=(c+0.5)/W, v=(r+0.5)/H.
    Points outside the unit square return zeros; neighbours outside the map
    contribute zero (border-zero policy).  Differentiable in both the map
    values and the point coordinates.
    """
    if value_map.ndim != 3:
        raise DimensionError(f"bilinear_sample expects a [C,H,W] map, got {value_map.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"points must be [N,2], got {points.shape}")
    c, h, w = value_map.shape
    n = points.shape[0]
    u = points.data[:, 0]
    v = points.data[:, 1]
    inside = (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (v <= 1.0)
    # out-of-square points contribute (and receive) exactly zero, so all
    # gather/scatter work runs on the in-bounds subset only
    idx_in = np.nonzero(inside)[0]

    xf = u[idx_in] * w - 0.5
    yf = v[idx_in] * h - 0.5
    x0 = np.floor(xf).astype(np.int64)
    y0 = np.floor(yf).astype(np.int64)
    wx = xf - x0
    wy = yf - y0

    flat_map = value_map.data.reshape(c, h * w)
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            flat = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            val = flat_map[:, flat].T * valid[:, None]  # [n_in, C]
            wgt = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
            corners.append((val, wgt, flat, valid, dx, dy))

    result = np.zeros((n, c), dtype=value_map.data.dtype)
    for val, wgt, *_ in corners:
        result[idx_in] += val * wgt[:, None]

    out, tape = _make_out(result, (value_map, points))
    if tape:
        def backward():
            if out.grad is None:
                return
            g = out.grad[idx_in]  # [n_in, C]
            if value_map.requires_grad or value_map.tape is not None:
                gmap = np.zeros((c, h * w), dtype=value_map.data.dtype)
                for val, wgt, flat, valid, dx, dy in corners:
                    contrib = (g * (wgt * valid)[:, None]).T  # [C, n_in]
                    np.add.at(gmap, (slice(None), flat), contrib)
                _accumulate(value_map, gmap.reshape(c, h, w))
            if points.requires_grad or points.tape is not None:
                gu = np.zeros(len(idx_in), dtype=points.data.dtype)
                gv = np.zeros(len(idx_in), dtype=points.data.dtype)
                for val, wgt, flat, valid, dx, dy in corners:
                    dwx = (1.0 if dx else -1.0) * (wy if dy else 1.0 - wy)
                    dwy = (1.0 if dy else -1.0) * (wx if dx else 1.0 - wx)
                    dot = (g * val).sum(axis=1)
                    gu += dot * dwx * w
                    gv += dot * dwy * h
                gpts = np.zeros_like(points.data)
                gpts[idx_in, 0] = gu
                gpts[idx_in, 1] = gv
                _accumulate(points, gpts)
        tape._record(backward)
    return out
