"""Pure-numpy versions of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with identical
semantics and identical floating-point summation order, so the two
backends produce bitwise-equal results.
"""

import numpy as np


def im2col3x3(x):
    """Unfold a zero-padded (N, C, H, W) batch into (C*9, N*H*W) columns."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for kh in range(3):
        for kw in range(3):
            cols[:, kh, kw] = xp[:, :, kh:kh + h, kw:kw + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * h * w)


def col2im3x3(cols, n, c, h, w):
    """Adjoint of :func:`im2col3x3`; taps are accumulated in (kh, kw) order."""
    cols = cols.reshape(c, 3, 3, n, h, w)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for kh in range(3):
        for kw in range(3):
            dxp[:, :, kh:kh + h, kw:kw + w] += cols[:, kh, kw].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])


def maxpool2x2(x):
    """Return (pooled, argmax) where argmax in 0..3 indexes the window row-major.

    Ties resolve to the first maximal element.
    """
    n, c, h, w = x.shape
    win = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(dout, idx):
    n, c, ho, wo = dout.shape
    dwin = np.zeros((n, c, ho, wo, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    return np.ascontiguousarray(
        dwin.reshape(n, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * 2, wo * 2)
    )
