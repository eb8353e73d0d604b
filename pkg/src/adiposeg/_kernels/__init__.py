"""Hot convolution kernels with a compiled core and a numpy fallback.

The compiled Cython module ``_conv`` is used when it imports; otherwise,
or when the environment variable ``ADIPOSEG_PURE_PYTHON`` is set to a
truthy value, the numpy implementations in :mod:`.fallback` are used.

All three entry points allocate their output and return it:

conv3d(x, w, stride, dilation, padding)
conv3d_grad_input(gout, w, in_spatial, stride, dilation, padding)
conv3d_grad_weight(x, gout, w_shape, stride, dilation, padding)
"""
import os

import numpy as np

from . import fallback

_pure = os.environ.get("ADIPOSEG_PURE_PYTHON", "").lower() not in ("", "0", "false", "no")
_compiled = None
if not _pure:
    try:
        from . import _conv as _compiled
    except ImportError:  # extension not built
        _compiled = None

_num_threads = 1


def backend_name():
    return "cython" if _compiled is not None else "numpy"


def set_backend(name):
    """Switch between ``"cython"`` and ``"numpy"`` at runtime (benchmarks, tests)."""
    global _compiled
    if name == "numpy":
        _compiled = None
    elif name == "cython":
        from . import _conv
        _compiled = _conv
    else:
        raise ValueError(f"unknown backend {name!r}")


def set_num_threads(n):
    global _num_threads
    _num_threads = max(1, int(n))


def _impl():
    return _compiled if _compiled is not None else fallback


def _out_spatial(in_spatial, k_spatial, stride, dilation, padding):
    return [
        (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1
        for n, k in zip(in_spatial, k_spatial)
    ]


def _padded_flat(a, pads):
    """Zero-pad the three spatial axes (negative pads crop) into a buffer
    followed by SLACK zeros, as the compiled core requires."""
    src = a
    crop = tuple(slice(max(-lo, 0), n - max(-hi, 0)) for (lo, hi), n in zip(pads, a.shape[2:]))
    src = src[(slice(None), slice(None)) + crop]
    pads = [(max(lo, 0), max(hi, 0)) for lo, hi in pads]
    shape = a.shape[:2] + tuple(n + lo + hi for n, (lo, hi) in zip(src.shape[2:], pads))
    size = int(np.prod(shape))
    flat = np.zeros(size + _compiled.SLACK_ELEMS, dtype=a.dtype)
    out = flat[:size].reshape(shape)
    out[(slice(None), slice(None)) + tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, src.shape[2:]))] = src
    return out


def _fast(stride, w_shape):
    return _compiled is not None and stride == 1 and w_shape[3] * w_shape[4] <= 64


def _conv_s1(x, w, dilation, pads):
    xp = _padded_flat(x, pads)
    spatial = [n - dilation * (k - 1) for n, k in zip(xp.shape[2:], w.shape[2:])]
    out = np.empty((x.shape[0], w.shape[0], spatial[0], spatial[1], xp.shape[4]), dtype=x.dtype)
    _compiled.forward(xp, w, out, dilation, _num_threads)
    return np.ascontiguousarray(out[..., : spatial[2]])


def conv3d(x, w, stride, dilation, padding):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if _fast(stride, w.shape):
        return _conv_s1(x, w, dilation, [(padding, padding)] * 3)
    spatial = _out_spatial(x.shape[2:], w.shape[2:], stride, dilation, padding)
    out = np.empty((x.shape[0], w.shape[0], *spatial), dtype=x.dtype)
    fallback.conv3d_forward(x, w, out, stride, dilation, padding)
    return out


def conv3d_grad_input(gout, w, in_spatial, stride, dilation, padding):
    gout = np.ascontiguousarray(gout)
    w = np.ascontiguousarray(w, dtype=gout.dtype)
    if _fast(stride, w.shape):
        # full correlation with the flipped, channel-transposed kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        pads = [(dilation * (k - 1) - padding,) * 2 for k in w.shape[2:]]
        return _conv_s1(gout, wf, dilation, pads)
    gin = np.empty((gout.shape[0], w.shape[1], *in_spatial), dtype=gout.dtype)
    fallback.conv3d_backward_input(gout, w, gin, stride, dilation, padding)
    return gin


def conv3d_grad_weight(x, gout, w_shape, stride, dilation, padding):
    x = np.ascontiguousarray(x)
    gout = np.ascontiguousarray(gout, dtype=x.dtype)
    gw = np.empty(tuple(w_shape), dtype=x.dtype)
    if _fast(stride, w_shape):
        xp = _padded_flat(x, [(padding, padding)] * 3)
        gext = np.zeros(gout.shape[:4] + (xp.shape[4],), dtype=x.dtype)
        gext[..., : gout.shape[4]] = gout
        _compiled.backward_weight(xp, gext, gw, dilation, _num_threads)
        return gw
    fallback.conv3d_backward_weight(x, gout, gw, stride, dilation, padding)
    return gw
