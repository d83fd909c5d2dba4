"""Dense tensors with reverse-mode automatic differentiation.

The engine supports exactly the operations the projection-synthesis
generators and losses need: 2-D convolution and its transpose, bilinear
resizing, channel concatenation, relu/lrelu, dropout, instance/layer
normalization, 2x2 max pooling (for the evaluation network), and the
elementwise/reduction ops the losses are built from. Image tensors use
N x C x H x W layout.

float32 is the working precision for training and inference; build
float64 tensors when running gradient checks. Ops never change dtype.

Subgradient conventions: relu'(0) = 0, d|x|/dx at 0 = 0. Gradient checks
should avoid sampling at these kinks.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, GraphError, ParameterError


class Tensor:
    """Dense N-d array plus an optional autodiff graph attachment.

    A tensor with no parents is a leaf; it is immutable by convention and
    safe to share. ``grad`` is populated by :func:`backward` and has the
    same shape as ``data``. Repeated backward calls accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def detach(self):
        """Same data, no graph attachment, no gradient."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32):
    """Make a leaf tensor, converting to ``dtype`` (float32 by default)."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, requires_grad=False, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _op(data, parents, backward_fn):
    # Record a graph node only when some parent wants gradients; otherwise
    # the result is a plain leaf and the graph stays empty (implicit no-grad).
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _check_same_dtype(*ts):
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise ParameterError(f"mixed dtypes in one operation: {sorted(map(str, dtypes))}")


def backward(loss, leaves=None):
    """Reverse-mode sweep from a scalar loss.

    Populates ``.grad`` on every reachable tensor with requires_grad=True,
    visiting each graph node exactly once. Gradients add to any existing
    ``.grad`` content, so repeated calls accumulate. Tensors listed in
    ``leaves`` get a zero gradient buffer even when the loss does not
    depend on them.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GraphError("loss has no graph attachment (nothing requires grad)")
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)

    # Iterative post-order topological sort over the requires_grad subgraph.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    # Per-pass gradient messages, kept separate from .grad so that repeated
    # backward calls accumulate without double-counting interior nodes.
    gmap = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = gmap.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in gmap:
                gmap[key] = gmap[key] + pg
            else:
                gmap[key] = pg


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_shape(a, b, "add")
    _check_same_dtype(a, b)
    return _op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same_shape(a, b, "sub")
    _check_same_dtype(a, b)
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same_shape(a, b, "mul")
    _check_same_dtype(a, b)
    return _op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, c):
    c = float(c)
    return _op(x.data * np.asarray(c, dtype=x.dtype), (x,), lambda g: (g * np.asarray(c, dtype=x.dtype),))


def absolute(x):
    s = np.sign(x.data)  # sign(0) = 0: subgradient at the kink
    return _op(np.abs(x.data), (x,), lambda g: (g * s,))


def tsum(x):
    """Sum of all elements; scalar output."""
    return _op(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def tmean(x):
    inv_n = 1.0 / x.data.size
    return _op(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g * np.asarray(inv_n, dtype=x.dtype), x.shape),),
    )


# ---------------------------------------------------------------------------
# Activations and dropout
# ---------------------------------------------------------------------------

def relu(x):
    mask = x.data > 0
    return _op(np.where(mask, x.data, np.asarray(0, dtype=x.dtype)), (x,), lambda g: (g * mask,))


def lrelu(x, slope=0.2):
    if not 0.0 <= slope < 1.0:
        raise ParameterError(f"lrelu slope must be in [0, 1), got {slope}")
    factor = np.where(x.data > 0, np.asarray(1, dtype=x.dtype), np.asarray(slope, dtype=x.dtype))
    return _op(x.data * factor, (x,), lambda g: (g * factor,))


def activation(x, kind, slope=0.2):
    """Elementwise activation, ``kind`` in {'relu', 'lrelu'}."""
    if kind == "relu":
        return relu(x)
    if kind == "lrelu":
        return lrelu(x, slope)
    raise ParameterError(f"unknown activation kind {kind!r}")


def dropout(x, keep_prob, training, rng=None):
    """Inverted dropout: kept entries are divided by ``keep_prob``.

    Identity when training is False or keep_prob == 1. The mask comes from
    ``rng`` (an int seed or a numpy Generator), so a fixed seed reproduces
    the mask bit-for-bit.
    """
    if keep_prob <= 0 or keep_prob > 1:
        raise ParameterError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1:
        return _op(x.data, (x,), lambda g: (g,))
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng or seed")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    keep = (rng.random(x.shape) < keep_prob).astype(x.dtype)
    factor = keep / np.asarray(keep_prob, dtype=x.dtype)
    return _op(x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _norm(x, gamma, beta, eps, axes):
    if x.data.ndim != 4:
        raise DimensionError(f"normalize expects N,C,H,W input, got shape {x.shape}")
    n_channels = x.shape[1]
    if gamma.shape != (n_channels,) or beta.shape != (n_channels,):
        raise DimensionError(
            f"affine params must have shape ({n_channels},), got {gamma.shape} and {beta.shape}"
        )
    _check_same_dtype(x, gamma, beta)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mu) * inv
    cshape = (1, n_channels, 1, 1)
    out = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(cshape)
            dx = inv * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = None
        return dx, dgamma, dbeta

    return _op(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Standardize each (sample, channel) plane over H,W, then affine."""
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    return _norm(x, gamma, beta, eps, axes=(2, 3))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardize each sample over C,H,W, then per-channel affine."""
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    return _norm(x, gamma, beta, eps, axes=(1, 2, 3))


def normalize(x, mode, gamma, beta, eps=1e-5):
    if mode == "instance":
        return instance_norm(x, gamma, beta, eps)
    if mode == "layer":
        return layer_norm(x, gamma, beta, eps)
    raise ParameterError(f"unknown normalization mode {mode!r}")


# ---------------------------------------------------------------------------
# Convolution machinery (im2col / col2im)
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, n_h, n_w):
    # xp: padded input (N, C, Hp, Wp); output (N, C*kh*kw, n_h*n_w)
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, n_h, n_w), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp[:, :, a : a + stride * n_h : stride, b : b + stride * n_w : stride]
    return cols.reshape(n, c * kh * kw, n_h * n_w)


def _col2im(cols, n, c, hp, wp, kh, kw, stride, n_h, n_w):
    # Scatter-add of column patches into an (N, C, Hp, Wp) buffer.
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, n_h, n_w)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + stride * n_h : stride, b : b + stride * n_w : stride] += cols[:, :, a, b]
    return out


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _crop_hw(x, pad):
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def _conv_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    cols = _im2col(_pad_hw(x, pad), kh, kw, stride, ho, wo)
    out = np.matmul(w.reshape(co, ci * kh * kw), cols)  # (N, Co, Ho*Wo)
    return out.reshape(n, co, ho, wo), cols


def _conv_input_grad(gy, w, stride, pad, x_shape):
    n, c, h, wd = x_shape
    co, ci, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    cols_g = np.matmul(w.reshape(co, ci * kh * kw).T, gy.reshape(n, co, ho * wo))
    big = _col2im(cols_g, n, ci, h + 2 * pad, wd + 2 * pad, kh, kw, stride, ho, wo)
    return _crop_hw(big, pad)


def _conv_kernel_grad(cols, gy, w_shape):
    n = gy.shape[0]
    co = w_shape[0]
    gy2 = gy.reshape(n, co, -1)
    gw = np.matmul(gy2, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape)


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """2-D convolution (cross-correlation), kernel layout (Cout, Cin, kh, kw).

    Output spatial size is floor((H + 2*pad - kh)/stride) + 1, same for W.
    Differentiable with respect to input, kernel, and bias.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, cin, h, wd = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != cin:
        raise DimensionError(f"conv2d: input has {cin} channels but kernel expects {ci}")
    if kh < 1 or kw < 1:
        raise ParameterError(f"kernel must be at least 1x1, got {kh}x{kw}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ParameterError(f"pad must be >= 0, got {pad}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ParameterError(
            f"padded input {h + 2 * pad}x{wd + 2 * pad} smaller than kernel {kh}x{kw}"
        )
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"bias must have shape ({co},), got {bias.shape}")
    _check_same_dtype(*((x, kernel) if bias is None else (x, kernel, bias)))

    out, cols = _conv_forward(x.data, kernel.data, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        gx = _conv_input_grad(g, kernel.data, stride, pad, x.shape) if x.requires_grad else None
        gw = _conv_kernel_grad(cols, g, kernel.shape) if kernel.requires_grad else None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        else:
            gb = None
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _op(out, parents, bwd)


def conv2d_transpose(x, kernel, bias=None, stride=1, pad=0, out_pad=0):
    """Transposed 2-D convolution, kernel layout (Cin, Cout, kh, kw).

    Output spatial size is (H-1)*stride - 2*pad + kh + out_pad. With a
    shared kernel this is the exact adjoint of conv2d at the same
    stride/pad: <conv2d(x, w), y> == <x, conv2d_transpose(y, w)>.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d_transpose expects 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, cin, h, wd = x.shape
    ci, co, kh, kw = kernel.shape
    if ci != cin:
        raise DimensionError(
            f"conv2d_transpose: input has {cin} channels but kernel expects {ci}"
        )
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ParameterError(f"pad must be >= 0, got {pad}")
    if out_pad >= stride or out_pad < 0:
        raise ParameterError(f"out_pad must satisfy 0 <= out_pad < stride, got {out_pad}")
    ho = (h - 1) * stride - 2 * pad + kh + out_pad
    wo = (wd - 1) * stride - 2 * pad + kw + out_pad
    if ho < 1 or wo < 1:
        raise ParameterError(f"degenerate output size {ho}x{wo}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"bias must have shape ({co},), got {bias.shape}")
    _check_same_dtype(*((x, kernel) if bias is None else (x, kernel, bias)))

    wmat = kernel.data.reshape(ci, co * kh * kw)
    cols = np.matmul(wmat.T, x.data.reshape(n, ci, h * wd))
    big = _col2im(cols, n, co, ho + 2 * pad, wo + 2 * pad, kh, kw, stride, h, wd)
    out = _crop_hw(big, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        if x.requires_grad:
            gx, _ = _conv_forward(g, kernel.data, stride, pad)
        else:
            gx = None
        if kernel.requires_grad:
            g_cols = _im2col(_pad_hw(g, pad), kh, kw, stride, h, wd)
            gw = np.matmul(x.data.reshape(n, ci, h * wd), g_cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(kernel.shape)
        else:
            gw = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        else:
            gb = None
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _op(out, parents, bwd)


# ---------------------------------------------------------------------------
# Resizing, concatenation, pooling
# ---------------------------------------------------------------------------

def _resize_coords(n_out, n_in):
    # Edge-aligned corners: output i samples input position i*(n_in-1)/(n_out-1).
    if n_in == 1 or n_out == 1:
        lo = np.zeros(n_out, dtype=np.intp)
        return lo, lo.copy(), np.zeros(n_out)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
    t = pos - lo
    return lo, lo + 1, t


def _interp_axis(arr, lo, hi, t, axis):
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(t)
    tt = t.reshape(shape).astype(arr.dtype)
    # a + t*(b - a): exact for constants and at t == 0 grid points
    return a + tt * (b - a)


def _interp_axis_grad(g, lo, hi, t, axis, n_in):
    shape = [1] * g.ndim
    shape[axis] = len(t)
    tt = t.reshape(shape).astype(g.dtype)
    g_lo = g * (1 - tt)
    g_hi = g * tt
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    out = np.zeros(out_shape, dtype=g.dtype)
    out_m = np.moveaxis(out, axis, 0)
    np.add.at(out_m, lo, np.moveaxis(g_lo, axis, 0))
    np.add.at(out_m, hi, np.moveaxis(g_hi, axis, 0))
    return out


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize with the edge-aligned corner convention.

    Corner pixels map exactly onto corner pixels; constant images are
    preserved exactly; resizing to the same size is the identity.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be >= 1, got {out_h}x{out_w}")
    if x.data.ndim != 4:
        raise DimensionError(f"resize_bilinear expects N,C,H,W input, got shape {x.shape}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return _op(x.data, (x,), lambda g: (g,))

    lo_h, hi_h, t_h = _resize_coords(out_h, h)
    lo_w, hi_w, t_w = _resize_coords(out_w, w)
    mid = _interp_axis(x.data, lo_h, hi_h, t_h, axis=2)
    out = _interp_axis(mid, lo_w, hi_w, t_w, axis=3)

    def bwd(g):
        gm = _interp_axis_grad(g, lo_w, hi_w, t_w, axis=3, n_in=w)
        gx = _interp_axis_grad(gm, lo_h, hi_h, t_h, axis=2, n_in=h)
        return (gx,)

    return _op(out, (x,), bwd)


def concat_channels(a, b):
    """Concatenate along the channel axis; a's channels come first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects N,C,H,W inputs")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise DimensionError(
            f"concat_channels: non-channel dims differ, {a.shape} vs {b.shape}"
        )
    _check_same_dtype(a, b)
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _op(out, (a, b), bwd)


def max_pool2d(x, size=2):
    """Non-overlapping max pooling; H and W must be divisible by ``size``.

    Gradient routes to the first maximal element of each window.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2d expects N,C,H,W input, got shape {x.shape}")
    n, c, h, w = x.shape
    if size < 1:
        raise ParameterError(f"pool size must be >= 1, got {size}")
    if h % size or w % size:
        raise ParameterError(f"spatial dims {h}x{w} not divisible by pool size {size}")
    ho, wo = h // size, w // size
    windows = (
        x.data.reshape(n, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, size * size)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(n, c, ho, wo, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return _op(out, (x,), bwd)


def assert_finite(x, context=""):
    """Raise NumericalError if the array or tensor holds NaN/Inf."""
    from .errors import NumericalError

    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite values{' in ' + context if context else ''}")
    return x
