"""Neural-network ops built on :mod:`loda.tensor`."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .exceptions import ShapeError
from .tensor import Tensor, add, as_tensor, matmul

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return Tensor._from_op(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def bw(g):
        gsum = g.sum(axis=-1, keepdims=True)
        gxsum = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv * (g - gsum / d - xhat * gxsum / d),)

    out = Tensor._from_op(xhat, (x,), bw)
    if gamma is not None:
        if gamma.shape != (d,):
            raise ShapeError(f"layernorm: gamma {gamma.shape} vs features {d}")
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Direct 2-D cross-correlation.

    x: (b, c_in, h, w); weight: (c_out, c_in, kh, kw); bias: (c_out,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    c_out, _, kh, kw = weight.shape
    b, c_in, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {xp.shape}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    # (b, c_in, ho, wo, kh, kw) view, no copy
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # (b, ho, wo, c_out)
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias {bias.shape} vs {c_out} output channels")
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))  # (c_out, c_in, kh, kw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(weight.data[:, :, i, j], g, axes=([0], [1]))  # (c_in, b, ho, wo)
                    gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += contrib.transpose(1, 0, 2, 3)
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._from_op(out, parents, bw)


def _bins(size: int, out: int) -> list[tuple[int, int]]:
    return [(math.floor(i * size / out), math.ceil((i + 1) * size / out)) for i in range(out)]


def avgpool2d(x: Tensor, output_size) -> Tensor:
    """Adaptive average pooling of (b, c, h, w) to (b, c, oh, ow)."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected (b,c,h,w), got {x.shape}")
    oh, ow = _pair(output_size)
    b, c, h, w = x.shape
    if h % oh == 0 and w % ow == 0:
        kh, kw = h // oh, w // ow
        out = x.data.reshape(b, c, oh, kh, ow, kw).mean(axis=(3, 5))

        def bw(g):
            spread = np.broadcast_to(g[:, :, :, None, :, None] / (kh * kw), (b, c, oh, kh, ow, kw))
            return (spread.reshape(b, c, h, w).copy(),)

        return Tensor._from_op(out, (x,), bw)

    rows, cols = _bins(h, oh), _bins(w, ow)
    out = np.empty((b, c, oh, ow))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw_general(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i, j][:, :, None, None] / area
        return (gx,)

    return Tensor._from_op(out, (x,), bw_general)
