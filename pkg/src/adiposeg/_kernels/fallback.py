"""Pure numpy versions of the convolution kernels (im2col + GEMM).

Same contracts as the compiled module; used when the extension is missing
or when ``ADIPOSEG_PURE_PYTHON=1``.
"""
import numpy as np


def _padded(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _taps(w_shape, out_spatial, stride, dilation):
    kz, ky, kx = w_shape[2:]
    zo, yo, xo = out_spatial
    for a in range(kz):
        for b in range(ky):
            for c in range(kx):
                yield (a, b, c), (
                    slice(a * dilation, a * dilation + (zo - 1) * stride + 1, stride),
                    slice(b * dilation, b * dilation + (yo - 1) * stride + 1, stride),
                    slice(c * dilation, c * dilation + (xo - 1) * stride + 1, stride),
                )


def _im2col(xp_b, w_shape, out_spatial, stride, dilation):
    C = xp_b.shape[0]
    K = int(np.prod(w_shape[2:]))
    cols = np.empty((C, K) + tuple(out_spatial), dtype=xp_b.dtype)
    for i, (_, sl) in enumerate(_taps(w_shape, out_spatial, stride, dilation)):
        cols[:, i] = xp_b[(slice(None),) + sl]
    return cols.reshape(C * K, -1)


def conv3d_forward(x, w, out, stride, dilation, padding, num_threads=1):
    xp = _padded(x, padding)
    O = w.shape[0]
    w2 = w.reshape(O, -1)
    spatial = out.shape[2:]
    for b in range(x.shape[0]):
        cols = _im2col(xp[b], w.shape, spatial, stride, dilation)
        out[b] = (w2 @ cols).reshape((O,) + tuple(spatial))


def conv3d_backward_input(gout, w, gin, stride, dilation, padding, num_threads=1):
    O, C = w.shape[:2]
    p = padding
    spatial = gout.shape[2:]
    w2 = w.reshape(O, -1)
    padded_shape = (C,) + tuple(n + 2 * p for n in gin.shape[2:])
    for b in range(gout.shape[0]):
        g_cols = (w2.T @ gout[b].reshape(O, -1)).reshape((C, -1) + tuple(spatial))
        gp = np.zeros(padded_shape, dtype=gin.dtype)
        for i, (_, sl) in enumerate(_taps(w.shape, spatial, stride, dilation)):
            gp[(slice(None),) + sl] += g_cols[:, i]
        if p:
            gp = gp[:, p:-p, p:-p, p:-p]
        gin[b] = gp


def conv3d_backward_weight(x, gout, gw, stride, dilation, padding, num_threads=1):
    xp = _padded(x, padding)
    O = gw.shape[0]
    spatial = gout.shape[2:]
    acc = np.zeros((O, int(np.prod(gw.shape[1:]))), dtype=gw.dtype)
    for b in range(x.shape[0]):
        cols = _im2col(xp[b], gw.shape, spatial, stride, dilation)
        acc += gout[b].reshape(O, -1) @ cols.T
    gw[...] = acc.reshape(gw.shape)
