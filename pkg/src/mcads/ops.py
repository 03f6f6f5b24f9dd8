"""Differentiable primitives over channels-last numpy tensors.

Each op computes eagerly, checks the result for non-finite values, and (when
a Tape is active and an input is tracked) records a closure that maps the
output gradient to per-input gradients. Convolutions go through an
im2col-style strided window view feeding one BLAS contraction; their input
gradients scatter back with a kh*kw loop over strided slices.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add_macs, guard_finite, record


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ValueError(f"{op}: {msg}")


def _same_dtype(op, *tensors):
    dtype = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dtype:
            raise TypeError(f"{op}: mixed dtypes {dtype} vs {t.dtype}")
    return dtype


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# convolution machinery


def _conv_axis(extent: int, k: int, stride: int, dilation: int, padding: str):
    """Return (pad_lo, pad_hi, out_extent) for one spatial axis."""
    span = dilation * (k - 1) + 1
    if padding == "valid":
        _require(extent >= span, "conv2d",
                 f"kernel span {span} exceeds extent {extent} with valid padding")
        return 0, 0, (extent - span) // stride + 1
    if padding == "same":
        out = -(-extent // stride)
        total = max((out - 1) * stride + span - extent, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"conv2d: unknown padding {padding!r}")


def _window_view(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int,
                 stride: int, dilation: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    shape = (n, oh, ow, kh, kw, c)
    strides = (sn, stride * sh, stride * sw, dilation * sh, dilation * sw, sc)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def _scatter_windows(dpatch: np.ndarray, padded_shape: tuple,
                     stride: int, dilation: int) -> np.ndarray:
    """Adjoint of _window_view: accumulate window gradients onto the canvas."""
    _, oh, ow, kh, kw, _ = dpatch.shape
    gxp = np.zeros(padded_shape, dtype=dpatch.dtype)
    for u in range(kh):
        hu = u * dilation
        for v in range(kw):
            wv = v * dilation
            gxp[:, hu:hu + oh * stride:stride,
                wv:wv + ow * stride:stride, :] += dpatch[:, :, :, u, v, :]
    return gxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int = 1,
           padding: str = "same", dilation: int = 1, groups: int = 1) -> Tensor:
    """2D convolution, NHWC input, (kh, kw, C_in/groups, C_out) weights.

    Output channels are grouped contiguously: group g owns input slice
    [g*cg:(g+1)*cg] and output slice [g*cog:(g+1)*cog]. groups == C_in with a
    single-channel kernel axis is the depthwise case and takes a fused path.
    """
    _require(x.ndim == 4, "conv2d", f"input must be NHWC, got ndim {x.ndim}")
    _require(w.ndim == 4, "conv2d", f"weights must be rank 4, got {w.ndim}")
    _same_dtype("conv2d", *((x, w) if b is None else (x, w, b)))
    n, h, wdt, cin = x.shape
    kh, kw, cg, cout = w.shape
    _require(cin % groups == 0, "conv2d",
             f"input channels {cin} not divisible by groups {groups}")
    _require(cout % groups == 0, "conv2d",
             f"output channels {cout} not divisible by groups {groups}")
    _require(cg == cin // groups, "conv2d",
             f"weight channel axis {cg} != C_in/groups {cin // groups}")
    if b is not None:
        _require(b.shape == (cout,), "conv2d", f"bias shape {b.shape} != ({cout},)")

    ph_lo, ph_hi, oh = _conv_axis(h, kh, stride, dilation, padding)
    pw_lo, pw_hi, ow = _conv_axis(wdt, kw, stride, dilation, padding)
    xd = x.data
    if ph_lo or ph_hi or pw_lo or pw_hi:
        xp = np.pad(xd, ((0, 0), (ph_lo, ph_hi), (pw_lo, pw_hi), (0, 0)))
    else:
        xp = xd
    patches = _window_view(xp, kh, kw, oh, ow, stride, dilation)
    wd = w.data
    depthwise = groups == cin and cg == 1 and cout == cin

    if groups == 1:
        y = np.tensordot(patches, wd, axes=([3, 4, 5], [0, 1, 2]))
    elif depthwise:
        y = np.einsum("nhwuvc,uvc->nhwc", patches, wd[:, :, 0, :])
    else:
        cog = cout // groups
        y = np.empty((n, oh, ow, cout), dtype=xd.dtype)
        for gi in range(groups):
            y[..., gi * cog:(gi + 1) * cog] = np.tensordot(
                patches[..., gi * cg:(gi + 1) * cg],
                wd[..., gi * cog:(gi + 1) * cog], axes=([3, 4, 5], [0, 1, 2]))
    if b is not None:
        y = y + b.data
    add_macs(n * oh * ow * kh * kw * cg * cout)
    guard_finite("conv2d", y)
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if groups == 1:
            dw = np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2]))
            dpatch = np.tensordot(g, wd, axes=([3], [3]))
        elif depthwise:
            dw = np.einsum("nhwuvc,nhwc->uvc", patches, g)[:, :, None, :]
            dpatch = g[:, :, :, None, None, :] * wd[None, None, None, :, :, 0, :]
        else:
            cog = cout // groups
            dw = np.empty_like(wd)
            dpatch = np.empty((n, oh, ow, kh, kw, cin), dtype=g.dtype)
            for gi in range(groups):
                gsl = g[..., gi * cog:(gi + 1) * cog]
                dw[..., gi * cog:(gi + 1) * cog] = np.tensordot(
                    patches[..., gi * cg:(gi + 1) * cg], gsl,
                    axes=([0, 1, 2], [0, 1, 2]))
                dpatch[..., gi * cg:(gi + 1) * cg] = np.tensordot(
                    gsl, wd[..., gi * cog:(gi + 1) * cog], axes=([3], [3]))
        gxp = _scatter_windows(dpatch, xp.shape, stride, dilation)
        dx = gxp[:, ph_lo:ph_lo + h, pw_lo:pw_lo + wdt, :]
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1, 2))

    return record("conv2d", out, inputs, bwd)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, *,
                     stride: int = 2) -> Tensor:
    """Transpose convolution: spatial extents multiplied by `stride`.

    Weights are (kh, kw, C_out, C_in): the same array a forward conv mapping
    C_out -> C_in with 'same' padding and this stride would use, so the
    forward here equals that conv's gradient w.r.t. its input. Implemented
    independently by zero-stuffing the input and correlating with the
    spatially flipped kernel at stride 1.
    """
    _require(x.ndim == 4, "conv2d_transpose", f"input must be NHWC, got ndim {x.ndim}")
    _require(w.ndim == 4, "conv2d_transpose", f"weights must be rank 4, got {w.ndim}")
    _same_dtype("conv2d_transpose", *((x, w) if b is None else (x, w, b)))
    n, h, wdt, cin = x.shape
    kh, kw, cout, wcin = w.shape
    _require(wcin == cin, "conv2d_transpose",
             f"weight input axis {wcin} != input channels {cin}")
    if b is not None:
        _require(b.shape == (cout,), "conv2d_transpose",
                 f"bias shape {b.shape} != ({cout},)")

    def stuffing(extent, k):
        plo = max(k - stride, 0) // 2  # matched 'same' conv's low pad
        return k - 1 - plo, stride - 1 + plo, extent * stride

    ah, bh, oh = stuffing(h, kh)
    aw, bw, ow = stuffing(wdt, kw)
    xs = np.zeros((n, (h - 1) * stride + 1 + ah + bh,
                   (wdt - 1) * stride + 1 + aw + bw, cin), dtype=x.dtype)
    hs = slice(ah, ah + (h - 1) * stride + 1, stride)
    ws = slice(aw, aw + (wdt - 1) * stride + 1, stride)
    xs[:, hs, ws, :] = x.data
    wf = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2))
    patches = _window_view(xs, kh, kw, oh, ow, 1, 1)
    y = np.tensordot(patches, wf, axes=([3, 4, 5], [0, 1, 2]))
    if b is not None:
        y = y + b.data
    add_macs(n * oh * ow * kh * kw * cin * cout)
    guard_finite("conv2d_transpose", y)
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        dwf = np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2]))
        dw = np.ascontiguousarray(dwf[::-1, ::-1].transpose(0, 1, 3, 2))
        dxs = _scatter_windows(np.tensordot(g, wf, axes=([3], [3])),
                               xs.shape, 1, 1)
        dx = np.ascontiguousarray(dxs[:, hs, ws, :])
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1, 2))

    return record("conv2d_transpose", out, inputs, bwd)


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, *, train: bool, eps: float = 1e-3,
               momentum: float = 0.99) -> Tensor:
    """Per-channel batch normalization over the N, H, W axes.

    Train mode normalizes with batch statistics, differentiates through them,
    and updates the (untracked) running stats in place with the given
    momentum. Inference mode uses the running stats only.
    """
    _require(x.ndim == 4, "batch_norm", f"input must be NHWC, got ndim {x.ndim}")
    c = x.shape[3]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        _require(t.shape == (c,), "batch_norm", f"{name} shape {t.shape} != ({c},)")
    axes = (0, 1, 2)
    xd = x.data

    if train:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean.data = momentum * running_mean.data + (1.0 - momentum) * mu
        running_var.data = momentum * running_var.data + (1.0 - momentum) * var
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * ivar
        y = gamma.data * xhat + beta.data
        guard_finite("batch_norm", y)
        out = Tensor(y)

        def bwd(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * gamma.data
            dx = ivar * (dxhat
                         - dxhat.mean(axis=axes)
                         - xhat * (dxhat * xhat).mean(axis=axes))
            return dx, dgamma, dbeta

        return record("batch_norm", out, (x, gamma, beta), bwd)

    ivar = 1.0 / np.sqrt(running_var.data + eps)
    xhat = (xd - running_mean.data) * ivar
    y = gamma.data * xhat + beta.data
    guard_finite("batch_norm", y)
    out = Tensor(y)

    def bwd_infer(g):
        return g * (gamma.data * ivar), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batch_norm", out, (x, gamma, beta), bwd_infer)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    guard_finite("relu", y)
    out = Tensor(y)
    return record("relu", out, (x,), lambda g: (g * (x.data > 0),))


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    xd = x.data
    y = np.where(xd > 0, xd, alpha * xd)
    guard_finite("leaky_relu", y)
    out = Tensor(y)
    return record("leaky_relu", out, (x,),
                  lambda g: (g * np.where(xd > 0, 1.0, alpha).astype(xd.dtype),))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows. Saturated outputs are pulled one
    # ulp inside (0,1): downstream contracts treat the interval as open, and
    # y*(1-y) then stays a truthful (tiny) slope instead of exactly zero.
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    one = xd.dtype.type(1.0)
    np.clip(y, np.finfo(xd.dtype).tiny, np.nextafter(one, one * 0), out=y)
    guard_finite("sigmoid", y)
    out = Tensor(y)
    return record("sigmoid", out, (x,), lambda g: (g * y * (1.0 - y),))


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)
    y = xd * s
    guard_finite("swish", y)
    out = Tensor(y)
    return record("swish", out, (x,),
                  lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    guard_finite("softmax", y)
    out = Tensor(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), bwd)


# ---------------------------------------------------------------------------
# pooling and resampling


def pool_global(x: Tensor, kind: str) -> Tensor:
    """Whole-image pooling per channel: (N, H, W, C) -> (N, 1, 1, C)."""
    _require(x.ndim == 4, "pool_global", f"input must be NHWC, got ndim {x.ndim}")
    _require(kind in ("avg", "max"), "pool_global", f"unknown kind {kind!r}")
    xd = x.data
    n, h, w, c = xd.shape
    if kind == "avg":
        y = xd.mean(axis=(1, 2), keepdims=True)
        guard_finite("pool_global", y)
        out = Tensor(y)
        return record("pool_global", out, (x,),
                      lambda g: (np.broadcast_to(g / (h * w), xd.shape),))
    y = xd.max(axis=(1, 2), keepdims=True)
    mask = xd == y
    counts = mask.sum(axis=(1, 2), keepdims=True).astype(xd.dtype)
    guard_finite("pool_global", y)
    out = Tensor(y)
    # Ties split the gradient; on distinct values this is plain argmax routing.
    return record("pool_global", out, (x,), lambda g: (mask * (g / counts),))


def pool_channel(x: Tensor, kind: str) -> Tensor:
    """Across-channel pooling per pixel: (N, H, W, C) -> (N, H, W, 1)."""
    _require(x.ndim == 4, "pool_channel", f"input must be NHWC, got ndim {x.ndim}")
    _require(kind in ("mean", "max", "min", "sum"), "pool_channel",
             f"unknown kind {kind!r}")
    xd = x.data
    c = xd.shape[3]
    if kind == "mean":
        y = xd.mean(axis=3, keepdims=True)
        bwd = lambda g: (np.broadcast_to(g / c, xd.shape),)
    elif kind == "sum":
        y = xd.sum(axis=3, keepdims=True)
        bwd = lambda g: (np.broadcast_to(g, xd.shape),)
    else:
        y = xd.max(axis=3, keepdims=True) if kind == "max" else xd.min(axis=3, keepdims=True)
        mask = xd == y
        counts = mask.sum(axis=3, keepdims=True).astype(xd.dtype)
        bwd = lambda g: (mask * (g / counts),)
    guard_finite("pool_channel", y)
    out = Tensor(y)
    return record("pool_channel", out, (x,), bwd)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping spatial max pooling; extents must divide by `size`."""
    _require(x.ndim == 4, "max_pool2d", f"input must be NHWC, got ndim {x.ndim}")
    n, h, w, c = x.shape
    _require(h % size == 0 and w % size == 0, "max_pool2d",
             f"extent ({h}, {w}) not divisible by window {size}")
    xr = x.data.reshape(n, h // size, size, w // size, size, c)
    y = xr.max(axis=(2, 4))
    mask = xr == y[:, :, None, :, None, :]
    counts = mask.sum(axis=(2, 4), keepdims=True).astype(xr.dtype)
    guard_finite("max_pool2d", y)
    out = Tensor(y)

    def bwd(g):
        spread = mask * (g[:, :, None, :, None, :] / counts)
        return (spread.reshape(n, h, w, c),)

    return record("max_pool2d", out, (x,), bwd)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping spatial mean pooling by an integer factor."""
    _require(x.ndim == 4, "avg_pool2d", f"input must be NHWC, got ndim {x.ndim}")
    n, h, w, c = x.shape
    _require(h % factor == 0 and w % factor == 0, "avg_pool2d",
             f"extent ({h}, {w}) not divisible by factor {factor}")
    xr = x.data.reshape(n, h // factor, factor, w // factor, factor, c)
    y = xr.mean(axis=(2, 4))
    guard_finite("avg_pool2d", y)
    out = Tensor(y)
    scale_ = 1.0 / (factor * factor)

    def bwd(g):
        gexp = np.broadcast_to(g[:, :, None, :, None, :] * scale_,
                               (n, h // factor, factor, w // factor, factor, c))
        return (gexp.reshape(n, h, w, c),)

    return record("avg_pool2d", out, (x,), bwd)


def _bilinear_axis(out_len: int, in_len: int, factor: int, dtype):
    src = (np.arange(out_len, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, in_len - 1.0)
    i0 = np.floor(src).astype(np.intp)
    frac = (src - i0).astype(dtype)
    i1 = np.minimum(i0 + 1, in_len - 1)
    return i0, i1, frac


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear x`factor` upsampling with half-pixel-aligned sample centers.

    Constant inputs stay constant; factor 1 is the identity.
    """
    _require(x.ndim == 4, "bilinear_upsample", f"input must be NHWC, got ndim {x.ndim}")
    _require(factor >= 1, "bilinear_upsample", f"factor must be >= 1, got {factor}")
    n, h, w, c = x.shape
    oh, ow = h * factor, w * factor
    xd = x.data
    i0, i1, fy = _bilinear_axis(oh, h, factor, xd.dtype)
    j0, j1, fx = _bilinear_axis(ow, w, factor, xd.dtype)
    wy0 = (1.0 - fy)[None, :, None, None]
    wy1 = fy[None, :, None, None]
    wx0 = (1.0 - fx)[None, None, :, None]
    wx1 = fx[None, None, :, None]
    rows = xd[:, i0, :, :] * wy0 + xd[:, i1, :, :] * wy1
    y = rows[:, :, j0, :] * wx0 + rows[:, :, j1, :] * wx1
    guard_finite("bilinear_upsample", y)
    out = Tensor(y)

    def bwd(g):
        drows = np.zeros((n, oh, w, c), dtype=g.dtype)
        np.add.at(drows, (slice(None), slice(None), j0), g * wx0)
        np.add.at(drows, (slice(None), slice(None), j1), g * wx1)
        dx = np.zeros((n, h, w, c), dtype=g.dtype)
        np.add.at(dx, (slice(None), i0), drows * wy0)
        np.add.at(dx, (slice(None), i1), drows * wy1)
        return (dx,)

    return record("bilinear_upsample", out, (x,), bwd)


def _d2s(arr: np.ndarray, block: int) -> np.ndarray:
    n, h, w, c = arr.shape
    c2 = c // (block * block)
    t = arr.reshape(n, h, w, c2, block, block).transpose(0, 1, 4, 2, 5, 3)
    return t.reshape(n, h * block, w * block, c2)


def _s2d(arr: np.ndarray, block: int) -> np.ndarray:
    n, h, w, c = arr.shape
    t = arr.reshape(n, h // block, block, w // block, block, c)
    return t.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // block, w // block,
                                                 c * block * block)


def depth_to_space(x: Tensor, block: int) -> Tensor:
    """Rearrange channel blocks to space, depth-major within each block:
    output pixel (h*b+dy, w*b+dx, c) reads input channel c*b*b + dy*b + dx."""
    _require(x.ndim == 4, "depth_to_space", f"input must be NHWC, got ndim {x.ndim}")
    _require(x.shape[3] % (block * block) == 0, "depth_to_space",
             f"channels {x.shape[3]} not divisible by block^2 {block * block}")
    y = _d2s(x.data, block)
    out = Tensor(y)
    return record("depth_to_space", out, (x,), lambda g: (_s2d(g, block),))


def space_to_depth(x: Tensor, block: int) -> Tensor:
    """Inverse of depth_to_space."""
    _require(x.ndim == 4, "space_to_depth", f"input must be NHWC, got ndim {x.ndim}")
    _require(x.shape[1] % block == 0 and x.shape[2] % block == 0, "space_to_depth",
             f"extent {x.shape[1:3]} not divisible by block {block}")
    y = _s2d(x.data, block)
    out = Tensor(y)
    return record("space_to_depth", out, (x,), lambda g: (_d2s(g, block),))


# ---------------------------------------------------------------------------
# linear algebra and structure


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: (..., d_in) @ (d_in, d_out) + b."""
    _require(w.ndim == 2, "dense", f"weights must be rank 2, got {w.ndim}")
    _require(x.shape[-1] == w.shape[0], "dense",
             f"input width {x.shape[-1]} != weight rows {w.shape[0]}")
    _same_dtype("dense", *((x, w) if b is None else (x, w, b)))
    if b is not None:
        _require(b.shape == (w.shape[1],), "dense",
                 f"bias shape {b.shape} != ({w.shape[1]},)")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    add_macs(x.size // x.shape[-1] * w.shape[0] * w.shape[1])
    guard_finite("dense", y)
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        dx = g @ w.data.T
        dw = np.tensordot(x.data, g, axes=(lead, lead))
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=lead)

    return record("dense", out, inputs, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch axes must match exactly."""
    _require(a.ndim >= 2 and b.ndim >= 2, "matmul", "operands must be rank >= 2")
    _require(a.ndim == b.ndim, "matmul",
             f"rank mismatch {a.ndim} vs {b.ndim} (no batch broadcasting)")
    _require(a.shape[:-2] == b.shape[:-2], "matmul",
             f"batch axes differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    _require(a.shape[-1] == b.shape[-2], "matmul",
             f"inner extents differ: {a.shape[-1]} vs {b.shape[-2]}")
    _same_dtype("matmul", a, b)
    y = a.data @ b.data
    batch = 1
    for s in a.shape[:-2]:
        batch *= s
    add_macs(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    guard_finite("matmul", y)
    out = Tensor(y)

    def bwd(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return record("matmul", out, (a, b), bwd)


def swap_last2(x: Tensor) -> Tensor:
    """Transpose the trailing two axes (key transpose in attention)."""
    _require(x.ndim >= 2, "swap_last2", "operand must be rank >= 2")
    y = np.swapaxes(x.data, -1, -2)
    out = Tensor(y)
    return record("swap_last2", out, (x,),
                  lambda g: (np.swapaxes(g, -1, -2),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    y = a.data + b.data
    guard_finite("add", y)
    out = Tensor(y)
    return record("add", out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting; covers (N,1,1,C) channel gates
    and (N,H,W,1) spatial gates."""
    _same_dtype("mul", a, b)
    y = a.data * b.data
    guard_finite("mul", y)
    out = Tensor(y)
    return record("mul", out, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (attention's 1/sqrt(d_k) and friends)."""
    y = x.data * x.dtype.type(s)
    guard_finite("scale", y)
    out = Tensor(y)
    return record("scale", out, (x,), lambda g: (g * x.dtype.type(s),))


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    _require(len(tensors) >= 1, "concat", "needs at least one tensor")
    _same_dtype("concat", *tensors)
    y = np.concatenate([t.data for t in tensors], axis=axis)
    guard_finite("concat", y)
    out = Tensor(y)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, tensors, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    y = x.data.reshape(shape)
    out = Tensor(y)
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def reduce_sum(x: Tensor) -> Tensor:
    y = x.data.sum()
    guard_finite("reduce_sum", y)
    out = Tensor(np.asarray(y, dtype=x.dtype))
    return record("reduce_sum", out, (x,),
                  lambda g: (np.broadcast_to(g, x.shape),))


def reduce_mean(x: Tensor) -> Tensor:
    y = x.data.mean()
    guard_finite("reduce_mean", y)
    out = Tensor(np.asarray(y, dtype=x.dtype))
    return record("reduce_mean", out, (x,),
                  lambda g: (np.broadcast_to(g / x.size, x.shape),))


# ---------------------------------------------------------------------------
# loss


def bce_loss(pred: Tensor, target: Tensor, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps].

    The clamp keeps saturated predictions finite; gradients are zero in the
    clamped region (the clamp is flat there).
    """
    _require(pred.shape == target.shape, "bce_loss",
             f"shape mismatch {pred.shape} vs {target.shape}")
    _same_dtype("bce_loss", pred, target)
    p = np.clip(pred.data, eps, 1.0 - eps)
    t = target.data
    y = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    guard_finite("bce_loss", y)
    out = Tensor(np.asarray(y, dtype=pred.dtype))
    m = pred.size
    inside = (pred.data > eps) & (pred.data < 1.0 - eps)

    def bwd(g):
        dp = g * inside * (p - t) / (p * (1.0 - p)) / m
        return dp.astype(pred.dtype, copy=False), None

    return record("bce_loss", out, (pred, target), bwd)
