"""Pure numpy im2col / col2im, used when the compiled extension is absent."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols, n_batch, chans, hp, wp, k, stride, ho, wo):
    out = np.zeros((n_batch, chans, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n_batch, ho, wo, chans, k, k)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += (
                cols6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            )
    return out
