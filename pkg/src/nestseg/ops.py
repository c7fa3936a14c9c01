"""Differentiable tensor operations.

All spatial ops use NCHW layout. Convolution is cross-correlation (no kernel
flip). Max ops break ties toward the first element in row-major order.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, log_branch, record


def _t(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _t(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _t(b, a)
    else:
        a = _t(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = b

        def bws(g):
            return (g * s,)

        return Tensor._make(a.data * s, (a,), bws, "mul")
    _check_broadcast(a, b, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _t(b, a)
    else:
        a = _t(a, b)
    _check_broadcast(a, b, "div")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, sa) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, sb) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    out = xd ** exponent

    def bw(g):
        return (g * exponent * xd ** (exponent - 1),)

    return Tensor._make(out, (x,), bw, "pow")


def square(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (2.0 * g * xd,)

    return Tensor._make(xd * xd, (x,), bw, "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        return (g / (2.0 * out),)

    return Tensor._make(out, (x,), bw, "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return Tensor._make(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (g / xd,)

    return Tensor._make(np.log(xd), (x,), bw, "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    log_branch(np.sign(xd - lo) + np.sign(xd - hi))

    def bw(g):
        return (g * inside,)

    return Tensor._make(np.clip(xd, lo, hi), (x,), bw, "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape),)

    out = x.data.sum(axis=axes, keepdims=keepdims)
    return Tensor._make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return Tensor._make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor._make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    record("matmul", batch * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dense: input shape {x.shape} does not match weight shape {weight.shape}")
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C); backward routes to the first argmax."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    log_branch(idx)
    out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]

    def bw(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=2)
        return (gx.reshape(n, c, h, w),)

    return Tensor._make(out, (x,), bw, "global_max_pool")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split on sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        return (g * out * (1.0 - out),)

    return Tensor._make(out, (x,), bw, "sigmoid")


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    xd = x.data
    positive = xd >= 0
    log_branch(positive)
    slope = np.where(positive, 1.0, alpha).astype(xd.dtype)

    def bw(g):
        return (g * slope,)

    return Tensor._make(xd * slope, (x,), bw, "leaky_relu")


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-np.clip(xd, -60, 60)))
    s = s.astype(xd.dtype)

    def bw(g):
        return (g * (s + xd * s * (1.0 - s)),)

    return Tensor._make(xd * s, (x,), bw, "swish")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out = z

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw, "softmax")


def attention_weights(q: Tensor, k: Tensor, scale: float) -> Tensor:
    """Row-stochastic ``softmax(scale * q @ k^T)``; shapes ``(N, L, d)``."""
    return softmax(matmul(q * scale, transpose(k, (0, 2, 1))), axis=-1)


# exp(-60) ~ 1e-26 keeps float32 weights and their products out of the
# subnormal range, which is orders of magnitude slower on most CPUs
_EXP_FLOOR = -60.0


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, scale: float, chunk: int = 128) -> Tensor:
    """``softmax(scale * q @ k^T) @ v`` over ``(N, L, d)`` inputs.

    Rows are processed in blocks so the ``L x L`` weight matrix is never
    materialized; backward recomputes each block from the saved row
    log-sum-exp. Numerically equivalent to :func:`attention_weights` followed
    by :func:`matmul`.
    """
    if q.shape != k.shape or q.shape[:2] != v.shape[:2] or q.ndim != 3:
        raise ValueError(f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    n, L, d = q.shape
    dv = v.shape[2]
    record("matmul", n * L * L * (d + dv))
    qd, kd, vd = q.data, k.data, v.data
    out = np.empty((n, L, dv), dtype=qd.dtype)
    lse = np.empty((n, L, 1), dtype=qd.dtype)
    for b in range(n):
        kt = kd[b].T * scale
        for r0 in range(0, L, chunk):
            s = qd[b, r0:r0 + chunk] @ kt
            m = s.max(axis=1, keepdims=True)
            s -= m
            np.maximum(s, _EXP_FLOOR, out=s)
            np.exp(s, out=s)
            z = s.sum(axis=1, keepdims=True)
            s /= z
            out[b, r0:r0 + chunk] = s @ vd[b]
            lse[b, r0:r0 + chunk] = m + np.log(z)

    def bw(g):
        gq = np.empty_like(qd)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        delta = (g * out).sum(axis=2, keepdims=True)
        for b in range(n):
            kt = kd[b].T * scale
            vt = vd[b].T
            for r0 in range(0, L, chunk):
                r1 = r0 + chunk
                s = qd[b, r0:r1] @ kt
                s -= lse[b, r0:r1]
                np.maximum(s, _EXP_FLOOR, out=s)
                a = np.exp(s, out=s)
                gv[b] += a.T @ g[b, r0:r1]
                ga = g[b, r0:r1] @ vt
                ga -= delta[b, r0:r1]
                ga *= a
                gq[b, r0:r1] = (ga @ kd[b]) * scale
                gk[b] += (ga.T @ qd[b, r0:r1]) * scale
        return gq, gk, gv

    return Tensor._make(out, (q, k, v), bw, "attention")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: str = "same",
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation.

    Args:
        x: input ``(N, Cin, H, W)``.
        weight: kernel ``(Cout, Cin // groups, k, k)`` with odd ``k``.
        bias: optional ``(Cout,)``.
        stride: output subsampling factor.
        dilation: spacing between kernel taps.
        padding: ``"same"`` (zero fill, output ``ceil(H / stride)``) or ``"valid"``.
        groups: channel groups; ``groups == Cin`` gives a depthwise conv.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {weight.shape}")
    if stride < 1 or dilation < 1:
        raise ValueError(f"conv2d: stride and dilation must be >= 1, got {stride}, {dilation}")
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise ValueError(
            f"conv2d: input shape {x.shape} incompatible with kernel shape {weight.shape} (groups={groups})"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match kernel shape {weight.shape}")
    k = kh
    span = dilation * (k - 1)
    if padding == "same":
        pad = span // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    ho = (h + 2 * pad - span - 1) // stride + 1
    wo = (w + 2 * pad - span - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {weight.shape} with dilation {dilation}")
    og = cout // groups
    record("conv2d", n * cout * ho * wo * cin_g * k * k)

    xd, wd = x.data, weight.data
    depthwise = cin_g == 1 and og == 1
    pointwise = k == 1 and stride == 1 and groups == 1

    if pointwise:
        xf = xd.reshape(n, cin, h * w)
        wm = wd.reshape(cout, cin)
        out = (wm @ xf).reshape(n, cout, h, w)
    else:
        xp = _pad_hw(xd, pad)
        out = np.zeros((n, cout, ho, wo), dtype=xd.dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                xs = xp[:, :, i * dilation:i * dilation + hs:stride, j * dilation:j * dilation + ws:stride]
                if depthwise:
                    out += xs * wd[:, 0, i, j][None, :, None, None]
                else:
                    wt = wd[:, :, i, j].reshape(groups, og, cin_g)
                    xs = xs.reshape(n, groups, cin_g, ho * wo)
                    out += (wt @ xs).reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if pointwise:
            gf = g.reshape(n, cout, h * w)
            if weight.requires_grad:
                gw = np.einsum("nol,ncl->oc", gf, xd.reshape(n, cin, h * w), optimize=True).reshape(wd.shape)
            if x.requires_grad:
                gx = (wd.reshape(cout, cin).T @ gf).reshape(xd.shape)
            return gx, gw, gb
        xp_ = _pad_hw(xd, pad)
        gxp = np.zeros_like(xp_) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        if not depthwise:
            gg = g.reshape(n, groups, og, ho * wo)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None),
                      slice(i * dilation, i * dilation + hs, stride),
                      slice(j * dilation, j * dilation + ws, stride))
                xs = xp_[sl]
                if depthwise:
                    if gw is not None:
                        gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xs)
                    if gxp is not None:
                        gxp[sl] += g * wd[:, 0, i, j][None, :, None, None]
                else:
                    wt = wd[:, :, i, j].reshape(groups, og, cin_g)
                    if gw is not None:
                        xs_ = xs.reshape(n, groups, cin_g, ho * wo)
                        gw[:, :, i, j] = (gg @ np.swapaxes(xs_, -1, -2)).sum(axis=0).reshape(cout, cin_g)
                    if gxp is not None:
                        gxp[sl] += (np.swapaxes(wt, -1, -2) @ gg).reshape(n, cin, ho, wo)
        if gxp is not None:
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw, "conv2d")


def depthwise_separable_conv(
    x: Tensor,
    dw_kernel: Tensor,
    pw_kernel: Tensor,
    pw_bias: Optional[Tensor] = None,
    dw_bias: Optional[Tensor] = None,
    dilation: int = 1,
) -> Tensor:
    """Per-channel ``k x k`` conv (same padding) followed by a 1x1 channel mix."""
    c = x.shape[1]
    if dw_kernel.shape[:2] != (c, 1):
        raise ValueError(f"depthwise_separable_conv: input shape {x.shape} does not match depthwise kernel {dw_kernel.shape}")
    y = conv2d(x, dw_kernel, dw_bias, dilation=dilation, groups=c)
    return conv2d(y, pw_kernel, pw_bias)


# ---------------------------------------------------------------------------
# pooling and resizing
# ---------------------------------------------------------------------------


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial extent must be even, got {x.shape}")
    record("maxpool2")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    log_branch(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = (np.arange(4) == idx[..., None]) * g[..., None]
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gw.astype(g.dtype, copy=False),)

    return Tensor._make(out, (x,), bw, "maxpool2")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    record("upsample")
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), bw, "upsample_nearest")


@lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, align-corners-false."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the two trailing axes (align-corners-false)."""
    n, c, h, w = x.shape
    ho, wo = size
    record("upsample")
    rh = _bilinear_matrix(h, ho).astype(x.dtype)
    rw = _bilinear_matrix(w, wo).astype(x.dtype)
    out = rh @ (x.data @ rw.T)

    def bw(g):
        return ((rh.T @ g) @ rw,)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw, "resize_bilinear")


def upsample2(x: Tensor, mode: str = "bilinear") -> Tensor:
    if mode == "bilinear":
        return resize_bilinear(x, (2 * x.shape[2], 2 * x.shape[3]))
    if mode == "nearest":
        return upsample_nearest(x, 2)
    raise ValueError(f"unknown upsample mode {mode!r}")


def pool_resize(x: Tensor, mode: str) -> Tensor:
    """Dispatch for ``maxpool2`` / ``upsample2_bilinear`` / ``upsample2_nearest``."""
    if mode == "maxpool2":
        return maxpool2(x)
    if mode.startswith("upsample2_"):
        return upsample2(x, mode.split("_", 1)[1])
    raise ValueError(f"unknown pool/resize mode {mode!r}")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    are updated in place: ``running = momentum * running + (1 - momentum) * batch``.
    """
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    xd = x.data
    gd = gamma.data.reshape(shape)
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError(f"batchnorm: training mode needs N*H*W >= 2 per channel, got input {x.shape}")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.reshape(c)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.reshape(c)

        def bw(g):
            gg = g * gd
            gx = (inv / m) * (m * gg - gg.sum(axis=(0, 2, 3), keepdims=True)
                              - xhat * (gg * xhat).sum(axis=(0, 2, 3), keepdims=True))
            ggam = (g * xhat).sum(axis=(0, 2, 3))
            gbet = g.sum(axis=(0, 2, 3))
            return gx, ggam, gbet
    else:
        mu = running_mean.reshape(shape).astype(xd.dtype)
        inv = (1.0 / np.sqrt(running_var.reshape(shape) + eps)).astype(xd.dtype)
        xhat = (xd - mu) * inv

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gd + beta.data.reshape(shape)
    record("batchnorm")
    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batchnorm")


def activation(x: Tensor, kind: str, alpha: float = 0.01, axis: int = -1) -> Tensor:
    """Dispatch by name: ``leaky_relu``, ``swish``, ``sigmoid``, ``softmax``."""
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "swish":
        return swish(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def sobel(x: Tensor) -> tuple[Tensor, Tensor]:
    """Fixed Sobel responses ``(Ex, Ey)`` per channel, zero same-padding."""
    c = x.shape[1]
    kx = Tensor(np.tile(SOBEL_X, (c, 1, 1, 1)), dtype=x.dtype)
    ky = Tensor(np.tile(SOBEL_Y, (c, 1, 1, 1)), dtype=x.dtype)
    return conv2d(x, kx, groups=c), conv2d(x, ky, groups=c)
