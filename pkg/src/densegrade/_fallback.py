"""Pure-NumPy implementations of the hot kernels.

These are the reference versions. The compiled module ``_ckernels`` must
produce bitwise-identical results; both accumulate in the same order.
"""
import numpy as np


def im2col(xp, kh, kw, sh, sw):
    """Unfold an already padded ``(N, C, Hp, Wp)`` array into columns.

    Returns an array of shape ``(C*kh*kw, N*Ho*Wo)`` where the row index
    enumerates ``(c, i, j)`` in C order, matching ``weight.reshape(O, -1)``.
    """
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, shape, kh, kw, sh, sw):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``shape``."""
    n, c, hp, wp = shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += \
                cols6[:, i, j].transpose(1, 0, 2, 3)
    return out


def bilinear_warp(img, inv, fill_nearest, cval):
    """Inverse-map warp of a ``(C, H, W)`` image.

    ``inv`` is the 2x3 matrix taking output pixel ``(x, y)`` to the input
    sampling location. Out-of-range samples either clamp to the border
    (``fill_nearest``) or read ``cval``.
    """
    c, h, w = img.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    if fill_nearest:
        sx = np.clip(sx, 0.0, w - 1.0)
        sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def tap(yy, xx):
        v = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)].astype(np.float64)
        if fill_nearest:
            return v
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        return np.where(valid, v, cval)

    # weights of exactly zero drop out so integer coordinates reproduce input
    out = (tap(y0, x0) * ((1.0 - fx) * (1.0 - fy))
           + tap(y0, x1) * (fx * (1.0 - fy))
           + tap(y1, x0) * ((1.0 - fx) * fy)
           + tap(y1, x1) * (fx * fy))
    return out.astype(img.dtype)
