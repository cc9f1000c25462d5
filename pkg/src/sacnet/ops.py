"""Differentiable primitives.

Each primitive is a :class:`~sacnet.tensor.Function` registered under a name
and reached through :func:`~sacnet.tensor.record`. The thin wrappers at the
bottom of the module are the public functional API.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import Function, ShapeError, Tensor, as_tensor, record, register


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ---------------------------------------------------------

@register("add")
class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("add", a, b)
        ctx.save(sa=a.shape, sb=b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(g, ctx.sb)


@register("sub")
class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("sub", a, b)
        ctx.save(sa=a.shape, sb=b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(-g, ctx.sb)


@register("mul")
class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("mul", a, b)
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g * ctx.b, ctx.a.shape), _unbroadcast(g * ctx.a, ctx.b.shape)


@register("div")
class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("div", a, b)
        out = a / b
        ctx.save(a=a, b=b, out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        ga = g / ctx.b
        return _unbroadcast(ga, ctx.a.shape), _unbroadcast(-ga * ctx.out, ctx.b.shape)


# elementwise unary ----------------------------------------------------------

@register("neg")
class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


@register("pow")
class Pow(Function):
    @staticmethod
    def forward(ctx, a, exponent):
        ctx.save(a=a, p=exponent)
        return a ** exponent

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.p * ctx.a ** (ctx.p - 1.0),)


@register("exp")
class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.out,)


@register("log")
class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a=a)
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.a,)


@register("sqrt")
class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.sqrt(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * 0.5 / ctx.out,)


@register("tanh")
class Tanh(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.tanh(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * (1.0 - ctx.out * ctx.out),)


@register("clamp_min")
class ClampMin(Function):
    @staticmethod
    def forward(ctx, a, floor):
        keep = a >= floor
        ctx.save(keep=keep)
        return np.where(keep, a, floor).astype(a.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.keep,)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@register("gelu")
class Gelu(Function):
    """Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""

    @staticmethod
    def forward(ctx, x):
        u = _GELU_C * (x + _GELU_A * (x * x * x))
        t = np.tanh(u)
        ctx.save(x=x, t=t)
        return 0.5 * x * (1.0 + t)

    @staticmethod
    def backward(ctx, g):
        x, t = ctx.x, ctx.t
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


# shape and reduction ----------------------------------------------------------

@register("sum")
class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(shape=a.shape, axis=axis, keepdims=keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            axes = (ctx.axis,) if isinstance(ctx.axis, int) else tuple(ctx.axis)
            axes = sorted(a % len(ctx.shape) for a in axes)
            for a in axes:
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, ctx.shape).copy(),)


@register("reshape")
class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        try:
            out = a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
        ctx.save(shape=a.shape)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


@register("transpose")
class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        ctx.save(inv=tuple(np.argsort(axes)))
        return a.transpose(axes)

    @staticmethod
    def backward(ctx, g):
        return (g.transpose(ctx.inv),)


@register("getitem")
class GetItem(Function):
    """Basic (slice/integer) indexing."""

    @staticmethod
    def forward(ctx, a, index):
        ctx.save(shape=a.shape, index=index)
        return np.array(a[index])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=g.dtype)
        out[ctx.index] = g
        return (out,)


@register("concat")
class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ref = arrays[0]
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(
                    x != y for i, (x, y) in enumerate(zip(a.shape, ref.shape)) if i != axis % ref.ndim):
                raise ShapeError(f"concat: incompatible shapes {ref.shape} and {a.shape} along axis {axis}")
        ctx.save(axis=axis, splits=np.cumsum([a.shape[axis] for a in arrays])[:-1])
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.split(g, ctx.splits, axis=ctx.axis))


@register("softmax")
class Softmax(Function):
    @staticmethod
    def forward(ctx, x, axis=-1):
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)
        ctx.save(out=out, axis=axis)
        return out

    @staticmethod
    def backward(ctx, g):
        y = ctx.out
        return (y * (g - (g * y).sum(axis=ctx.axis, keepdims=True)),)


# normalization ------------------------------------------------------------------

@register("layernorm")
class LayerNormOp(Function):
    """Normalize over ``axis`` then apply a per-channel affine map."""

    @staticmethod
    def forward(ctx, x, gamma, beta, axis=1, eps=1e-6):
        axis = axis % x.ndim
        c = x.shape[axis]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"layernorm: input {x.shape} has {c} channels on axis {axis}, "
                             f"affine params have shapes {gamma.shape} and {beta.shape}")
        bshape = [1] * x.ndim
        bshape[axis] = c
        mu = x.mean(axis=axis, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axis, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        g = gamma.reshape(bshape)
        ctx.save(xhat=xhat, inv=inv, g=g, axis=axis, c=c)
        return xhat * g + beta.reshape(bshape)

    @staticmethod
    def backward(ctx, gout):
        axis, xhat = ctx.axis, ctx.xhat
        others = tuple(i for i in range(xhat.ndim) if i != axis)
        dgamma = (gout * xhat).sum(axis=others)
        dbeta = gout.sum(axis=others)
        dxhat = gout * ctx.g
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = ctx.inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta


# convolution ----------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


@register("conv2d")
class Conv2dOp(Function):
    """Cross-correlation with zero padding, NCHW layout."""

    @staticmethod
    def forward(ctx, x, w, *maybe_bias, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
        B, C, H, W = x.shape
        O, Ci, kh, kw = w.shape
        if C != Ci:
            raise ShapeError(f"conv2d: input has {C} channels but weight {w.shape} expects {Ci}")
        Ho = conv_output_size(H, kh, stride, padding)
        Wo = conv_output_size(W, kw, stride, padding)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"conv2d: non-positive output size {Ho}x{Wo} for input {x.shape}, "
                             f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        out = np.zeros((O, B, Ho, Wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
                out += np.tensordot(w[:, :, i, j], patch, axes=([1], [1]))
        out = out.transpose(1, 0, 2, 3)
        if maybe_bias:
            b = maybe_bias[0]
            if b.shape != (O,):
                raise ShapeError(f"conv2d: bias shape {b.shape} does not match {O} output channels")
            out = out + b.reshape(1, O, 1, 1)
        ctx.save(xp=xp, w=w, stride=stride, padding=padding, xshape=x.shape,
                 has_bias=bool(maybe_bias), Ho=Ho, Wo=Wo)
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, g):
        xp, w, s, p = ctx.xp, ctx.w, ctx.stride, ctx.padding
        O, C, kh, kw = w.shape
        Ho, Wo = ctx.Ho, ctx.Wo
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + s * Ho, s), slice(j, j + s * Wo, s))
                gw[:, :, i, j] = np.tensordot(g, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
                gxp[sl] += np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        H, W = ctx.xshape[2:]
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if ctx.has_bias:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)


@register("channel_linear")
class ChannelLinear(Function):
    """Position-wise linear map over axis 1: (B, Cin, ...) x (Cout, Cin) -> (B, Cout, ...)."""

    @staticmethod
    def forward(ctx, x, w, *maybe_bias):
        if w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"channel_linear: input {x.shape} does not match weight {w.shape}")
        out = np.moveaxis(np.tensordot(w, x, axes=([1], [1])), 0, 1)
        if maybe_bias:
            b = maybe_bias[0]
            if b.shape != (w.shape[0],):
                raise ShapeError(f"channel_linear: bias {b.shape} does not match weight {w.shape}")
            out = out + b.reshape((1, -1) + (1,) * (x.ndim - 2))
        ctx.save(x=x, w=w, has_bias=bool(maybe_bias))
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.x, ctx.w
        others = (0,) + tuple(range(2, x.ndim))
        gw = np.tensordot(g, x, axes=(others, others))
        gx = np.ascontiguousarray(np.moveaxis(np.tensordot(w, g, axes=([0], [1])), 0, 1))
        grads = [gx, gw]
        if ctx.has_bias:
            grads.append(g.sum(axis=others))
        return tuple(grads)


# bilinear sampling -------------------------------------------------------------------

@register("bilinear_gather")
class BilinearGather(Function):
    """Sample ``x`` (N, C, H, W) at fractional (row, col) locations.

    ``py`` and ``px`` share a shape (N, *S); the result is (N, C, *S). Corners
    outside the image read as zero.
    """

    @staticmethod
    def forward(ctx, x, py, px):
        if x.ndim != 4 or py.shape != px.shape or py.shape[0] != x.shape[0]:
            raise ShapeError(f"bilinear_gather: image {x.shape}, rows {py.shape}, cols {px.shape}")
        N, C, H, W = x.shape
        S = py.shape[1:]
        py = py.reshape(N, -1)
        px = px.reshape(N, -1)
        y0 = np.floor(py)
        x0 = np.floor(px)
        fy = py - y0
        fx = px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        xf = x.reshape(N, C, H * W)
        corners = []
        for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            idx = np.where(valid, yy * W + xx, 0)
            vals = np.take_along_axis(xf, idx[:, None, :], axis=2)
            vals *= valid[:, None, :]
            wy = fy if dy else 1.0 - fy
            wx = fx if dx else 1.0 - fx
            corners.append((idx, valid, vals, wy, wx, dy, dx))
        out = np.zeros((N, C, py.shape[1]), dtype=x.dtype)
        for idx, valid, vals, wy, wx, _, _ in corners:
            out += vals * (wy * wx)[:, None, :]
        ctx.save(corners=corners, xshape=x.shape, S=S)
        return out.reshape((N, C) + S)

    @staticmethod
    def backward(ctx, g):
        N, C, H, W = ctx.xshape
        g = g.reshape(N, C, -1)
        P = g.shape[2]
        base = (np.arange(N * C, dtype=np.int64) * (H * W)).reshape(N, C, 1)
        flat_idx = []
        flat_w = []
        gy = np.zeros((N, P), dtype=g.dtype)
        gx = np.zeros((N, P), dtype=g.dtype)
        for idx, valid, vals, wy, wx, dy, dx in ctx.corners:
            w = (wy * wx * valid)[:, None, :]
            flat_idx.append((base + idx[:, None, :]).ravel())
            flat_w.append((g * w).ravel())
            gv = np.einsum("ncp,ncp->np", g, vals)
            gy += gv * (wx if dy else -wx)
            gx += gv * (wy if dx else -wy)
        gimg = np.bincount(np.concatenate(flat_idx), weights=np.concatenate(flat_w),
                           minlength=N * C * H * W)
        S = ctx.S
        return (gimg.reshape(ctx.xshape).astype(g.dtype, copy=False),
                gy.reshape((N,) + S), gx.reshape((N,) + S))


def resize_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (dst, src) for align-corners-false linear resizing."""
    scale = src / dst
    coord = (np.arange(dst) + 0.5) * scale - 0.5
    coord = np.maximum(coord, 0.0)
    lo = np.minimum(np.floor(coord).astype(np.int64), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = coord - lo
    m = np.zeros((dst, src), dtype=dtype)
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


@register("resize_bilinear")
class ResizeBilinear(Function):
    @staticmethod
    def forward(ctx, x, out_h, out_w):
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"resize_bilinear: invalid output size {out_h}x{out_w}")
        H, W = x.shape[-2:]
        ry = resize_matrix(H, out_h, x.dtype)
        rx = resize_matrix(W, out_w, x.dtype)
        ctx.save(ry=ry, rx=rx)
        return np.ascontiguousarray(np.matmul(np.matmul(ry, x), rx.T))

    @staticmethod
    def backward(ctx, g):
        return (np.ascontiguousarray(np.matmul(np.matmul(ctx.ry.T, g), ctx.rx)),)


# functional API -----------------------------------------------------------------------

def add(a, b) -> Tensor:
    return record("add", [a, b])


def mul(a, b) -> Tensor:
    return record("mul", [a, b])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return record("concat", list(tensors), axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return record("softmax", [x], axis=axis)


def gelu(x: Tensor) -> Tensor:
    return record("gelu", [x])


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1, eps: float = 1e-6) -> Tensor:
    return record("layernorm", [x, gamma, beta], axis=axis, eps=eps)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    inputs = [x, weight] if bias is None else [x, weight, bias]
    return record("conv2d", inputs, stride=stride, padding=padding)


def channel_linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    inputs = [x, weight] if bias is None else [x, weight, bias]
    return record("channel_linear", inputs)


def bilinear_gather(x: Tensor, rows: Tensor, cols: Tensor) -> Tensor:
    return record("bilinear_gather", [x, rows, cols])


def bilinear_sample(x: Tensor, point) -> Tensor:
    """Sample a (C, H, W) image at one fractional ``(row, col)`` point; returns (C,)."""
    x = as_tensor(x)
    point = as_tensor(point)
    if x.ndim != 3 or point.shape != (2,):
        raise ShapeError(f"bilinear_sample: image {x.shape}, point {point.shape}")
    row = point[0:1].reshape(1, 1)
    col = point[1:2].reshape(1, 1)
    return bilinear_gather(x.reshape((1,) + x.shape), row, col).reshape(x.shape[0])


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return record("resize_bilinear", [x], out_h=int(out_h), out_w=int(out_w))


@dataclass
class DropPathConfig:
    drop_prob: float = 0.0
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")


def droppath(x: Tensor, cfg: DropPathConfig, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Stochastic depth: zero whole samples with probability ``drop_prob``, rescale survivors."""
    if cfg.mode == "eval" or cfg.drop_prob == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode droppath needs an explicit rng")
    keep = 1.0 - cfg.drop_prob
    mask = (rng.random(x.shape[0]) < keep).astype(x.dtype) / keep
    return x * Tensor(mask.reshape((-1,) + (1,) * (x.ndim - 1)))
