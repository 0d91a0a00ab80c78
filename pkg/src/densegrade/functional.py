"""Differentiable layer primitives for the DenseNet forward pass.

Images are ``N x C x H x W``. Convolution is cross-correlation (no kernel
flip) and lowers to im2col + one matrix product; the im2col/col2im kernels
come from :mod:`densegrade.kernels`.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, make_result

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ValueError(f"invalid stride {stride} / padding {padding}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp} (zero-size output)")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    pointwise = kh == kw == 1 and sh == sw == 1 and ph == pw == 0
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        cols = kernels.im2col(xp, kh, kw, sh, sw)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data.reshape(o, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = w2.T @ gt
            if pointwise:
                gx = np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                gxp = kernels.col2im(gcols, (n, c, hp, wp), kh, kw, sh, sw)
                gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, bw, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPSILON) -> Tensor:
    """Per-channel normalization.

    In training mode the batch statistics are used and the running arrays are
    updated in place (``new = (1 - momentum) * old + momentum * batch``, the
    running variance taking the unbiased batch estimate).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    n, c, h, w = x.shape
    m = n * h * w
    shp = (1, c, 1, 1)
    if training:
        if m < 2:
            raise ValueError("batch_norm: train-mode variance over a single element per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean.reshape(shp)
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
        xc = x.data - mean.reshape(shp)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * invstd.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shp)
            if training:
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(shp)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shp)
                gx = (invstd.reshape(shp) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd.reshape(shp)
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def bw(g):
        return (g * mask,)

    return make_result(out, (x,), bw, "relu")


def _pool_columns(x: np.ndarray, kh, kw, sh, sw, ph, pw, pad_value):
    n, c, h, w = x.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=pad_value)
    hp, wp = x.shape[2], x.shape[3]
    if kh > hp or kw > wp:
        raise ShapeError(f"pooling window {kh}x{kw} larger than input {hp}x{wp}")
    cols = kernels.im2col(x.reshape(n * c, 1, hp, wp), kh, kw, sh, sw)
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    return cols, (n * c, 1, hp, wp), ho, wo


def max_pool2d(x: Tensor, window=2, stride=None, padding=0) -> Tensor:
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    cols, pshape, ho, wo = _pool_columns(x.data, kh, kw, sh, sw, ph, pw, -np.inf)
    arg = cols.argmax(axis=0)  # first occurrence on ties
    out = cols[arg, np.arange(cols.shape[1])].reshape(n, c, ho, wo)

    def bw(g):
        gcols = np.zeros_like(cols)
        gcols[arg, np.arange(cols.shape[1])] = g.reshape(-1)
        gxp = kernels.col2im(gcols, pshape, kh, kw, sh, sw).reshape(n, c, pshape[2], pshape[3])
        return (gxp[:, :, ph:ph + h, pw:pw + w],)

    return make_result(out, (x,), bw, "max_pool2d")


def avg_pool2d(x: Tensor, window=2, stride=None) -> Tensor:
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    n, c, h, w = x.shape
    cols, pshape, ho, wo = _pool_columns(x.data, kh, kw, sh, sw, 0, 0, 0.0)
    scale = 1.0 / (kh * kw)
    out = (cols.mean(axis=0)).reshape(n, c, ho, wo).astype(x.dtype, copy=False)

    def bw(g):
        gcols = np.broadcast_to((g.reshape(1, -1) * scale).astype(x.dtype), cols.shape)
        return (kernels.col2im(gcols, pshape, kh, kw, sh, sw).reshape(x.shape),)

    return make_result(out, (x,), bw, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g.reshape(n, c, 1, 1) / (h * w), x.shape).astype(x.dtype),)

    return make_result(out.astype(x.dtype, copy=False), (x,), bw, "global_avg_pool")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not match batch/spatial {(n, h, w)}")
    if len(inputs) == 1:
        out = inputs[0].data.copy()
    else:
        out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return make_result(out, inputs, bw, "concat_channels")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, bw, "linear")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple:
    """Mean cross-entropy and the softmax probabilities (as a constant tensor)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return ((d * (g / n)).astype(logits.dtype),)

    return make_result(loss, (logits,), bw, "softmax_cross_entropy"), Tensor(probs, dtype=logits.dtype)
