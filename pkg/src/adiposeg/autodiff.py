"""Dense 5-D tensors with tape-based reverse-mode differentiation.

Only the operators the segmentation networks need are provided. Arrays use
the ``[batch, channels, z, y, x]`` layout throughout; z is the head-feet
axis. Training runs in float32, gradient checks in float64.

Example::

    tape = Tape()
    x = Tensor(np.ones((1, 1, 4, 4, 4), np.float32))
    w = Tensor(np.full((1, 1, 1, 1, 1), 2.0, np.float32), param=True)
    tape.watch([w])
    y = op_forward("conv3d", [x, w], OpAttrs(kernel=(1, 1, 1)), tape)
    loss = op_forward("sum", [y], OpAttrs(), tape)
    grads = backward(tape, loss.id)
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import _kernels

OP_KINDS = (
    "conv3d",
    "conv3d_transpose",
    "batchnorm3d",
    "relu",
    "maxpool3d",
    "add",
    "concat_channels",
    "softmax_channels",
)

_ids = itertools.count(1)


class ShapeError(ValueError):
    """Input shapes are inconsistent with the op and its attributes."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    """A dense array with a process-unique id.

    ``param=True`` marks trainable tensors; those are the keys of the
    gradient map returned by :func:`backward`.
    """

    __slots__ = ("data", "id", "param", "name")

    def __init__(self, data, param: bool = False, name: str | None = None):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.id = next(_ids)
        self.param = param
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor(id={self.id}{tag}, shape={self.shape}, dtype={self.dtype})"


@dataclass(frozen=True)
class OpAttrs:
    kernel: tuple = (1, 1, 1)
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    eps: float = 1e-5
    momentum: float = 0.9
    axis: int = 1
    coeffs: tuple | None = None  # weighted "add"; None means plain sum
    gamma: float = 2.0  # focal exponent of the segmentation loss
    training: bool = True
    # batch-norm running statistics, updated in place in training mode
    running_mean: np.ndarray | None = field(default=None, compare=False, repr=False)
    running_var: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if len(self.kernel) != 3 or min(self.kernel) < 1:
            raise ValueError(f"kernel must be three positive extents, got {self.kernel}")


@dataclass
class Node:
    kind: str
    inputs: tuple
    attrs: OpAttrs
    out: int
    backward: Callable
    out_shape: tuple = ()
    out_dtype: object = np.float32


class Tape:
    """Ordered record of op nodes plus the set of watched parameters."""

    def __init__(self, record: bool = True):
        self.nodes: list[Node] = []
        self.params: dict[int, Tensor] = {}
        self.record = record
        self._produced: set[int] = set()

    def watch(self, params: Sequence[Tensor]):
        for p in params:
            self.params[p.id] = p

    def push(self, node: Node):
        if node.out in self._produced:
            raise RuntimeError(f"tensor {node.out} produced twice on the tape")
        self._produced.add(node.out)
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)


def conv_out_extent(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv_transpose_out_extent(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + dilation * (k - 1) + 1


# ---------------------------------------------------------------- ops ---
# Each forward returns (out, vjp) where vjp(gout) -> tuple of input grads
# (None for inputs that need no gradient).


def _check_5d(x, what):
    if x.ndim != 5:
        raise ShapeError(f"{what}: expected a 5-D [B, C, Z, Y, X] array, got shape {x.shape}")


def _conv3d(arrays, a: OpAttrs):
    x, w = arrays[0], arrays[1]
    b = arrays[2] if len(arrays) > 2 else None
    _check_5d(x, "conv3d input")
    _check_5d(w, "conv3d weight")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3d: weight expects {w.shape[1]} input channels, got {x.shape[1]}")
    if tuple(w.shape[2:]) != tuple(a.kernel):
        raise ShapeError(f"conv3d: weight kernel {w.shape[2:]} != attrs.kernel {a.kernel}")
    out_sp = [conv_out_extent(n, k, a.stride, a.dilation, a.padding) for n, k in zip(x.shape[2:], a.kernel)]
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d: non-positive output extent {out_sp} for input {x.shape[2:]}")
    pointwise = tuple(a.kernel) == (1, 1, 1) and a.stride == 1 and a.padding == 0
    if pointwise:
        B, C = x.shape[:2]
        O = w.shape[0]
        w2 = w.reshape(O, C)
        out = np.matmul(w2, x.reshape(B, C, -1)).reshape((B, O) + x.shape[2:])
    else:
        out = _kernels.conv3d(x, w, a.stride, a.dilation, a.padding)
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)

    def vjp(g):
        if pointwise:
            B, C = x.shape[:2]
            O = w.shape[0]
            g2 = g.reshape(B, O, -1)
            gx = np.matmul(w.reshape(O, C).T, g2).reshape(x.shape)
            gw = np.einsum("bov,bcv->oc", g2, x.reshape(B, C, -1)).reshape(w.shape)
        else:
            gx = _kernels.conv3d_grad_input(g, w, x.shape[2:], a.stride, a.dilation, a.padding)
            gw = _kernels.conv3d_grad_weight(x, g, w.shape, a.stride, a.dilation, a.padding)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return out, vjp


def _conv3d_transpose(arrays, a: OpAttrs):
    """Weight layout ``[C_in, C_out, kz, ky, kx]``."""
    x, w = arrays[0], arrays[1]
    b = arrays[2] if len(arrays) > 2 else None
    _check_5d(x, "conv3d_transpose input")
    _check_5d(w, "conv3d_transpose weight")
    if w.shape[0] != x.shape[1]:
        raise ShapeError(f"conv3d_transpose: weight expects {w.shape[0]} input channels, got {x.shape[1]}")
    if tuple(w.shape[2:]) != tuple(a.kernel):
        raise ShapeError(f"conv3d_transpose: weight kernel {w.shape[2:]} != attrs.kernel {a.kernel}")
    out_sp = [conv_transpose_out_extent(n, k, a.stride, a.dilation, a.padding) for n, k in zip(x.shape[2:], a.kernel)]
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d_transpose: non-positive output extent {out_sp}")
    B, C = x.shape[:2]
    O = w.shape[1]
    k = tuple(a.kernel)
    blocky = k == (a.stride,) * 3 and a.padding == 0 and a.dilation == 1
    if blocky:
        # no overlap between taps: one GEMM, then interleave
        s = a.stride
        Z, Y, X = x.shape[2:]
        t = np.matmul(w.reshape(C, -1).T, x.reshape(B, C, -1))  # [B, O*s^3, V]
        t = t.reshape(B, O, s, s, s, Z, Y, X).transpose(0, 1, 5, 2, 6, 3, 7, 4)
        out = np.ascontiguousarray(t).reshape(B, O, Z * s, Y * s, X * s)
    else:
        out = _kernels.conv3d_grad_input(x, w, out_sp, a.stride, a.dilation, a.padding)
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)

    def vjp(g):
        if blocky:
            s = a.stride
            Z, Y, X = x.shape[2:]
            gt = g.reshape(B, O, Z, s, Y, s, X, s).transpose(0, 1, 3, 5, 7, 2, 4, 6)
            gt = np.ascontiguousarray(gt).reshape(B, O * s**3, -1)
            gx = np.matmul(w.reshape(C, -1), gt).reshape(x.shape)
            gw = np.einsum("bcv,bkv->ck", x.reshape(B, C, -1), gt).reshape(w.shape)
        else:
            gx = _kernels.conv3d(g, w, a.stride, a.dilation, a.padding)
            gw = _kernels.conv3d_grad_weight(g, x, w.shape, a.stride, a.dilation, a.padding)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return out, vjp


def _batchnorm3d(arrays, a: OpAttrs):
    x, gamma, beta = arrays
    _check_5d(x, "batchnorm3d input")
    B, C = x.shape[:2]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm3d: scale/shift must have shape ({C},)")
    xr = x.reshape(B, C, -1)
    n = xr.shape[0] * xr.shape[2]
    if a.training:
        mean = xr.mean(axis=(0, 2))
        xc = xr - mean[None, :, None]
        var = np.einsum("bcv,bcv->c", xc, xc) / n
        if a.running_mean is not None:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            rm, rv = a.running_mean, a.running_var
            rm *= a.momentum
            rm += (1.0 - a.momentum) * mean
            rv *= a.momentum
            rv += (1.0 - a.momentum) * unbiased
    else:
        if a.running_mean is None:
            raise ValueError("batchnorm3d in inference mode needs running statistics")
        mean = a.running_mean.astype(x.dtype)
        var = a.running_var.astype(x.dtype)
        xc = xr - mean[None, :, None]
    inv = (1.0 / np.sqrt(var + a.eps)).astype(x.dtype)
    xhat = xc * inv[None, :, None]
    out = (xhat * gamma[None, :, None] + beta[None, :, None]).reshape(x.shape)

    def vjp(g):
        gr = g.reshape(B, C, -1)
        gbeta = gr.sum(axis=(0, 2))
        ggamma = np.einsum("bcv,bcv->c", gr, xhat)
        if a.training:
            gx = (gr - (gbeta / n)[None, :, None] - xhat * (ggamma / n)[None, :, None])
            gx *= (gamma * inv)[None, :, None]
        else:
            gx = gr * (gamma * inv)[None, :, None]
        return gx.reshape(x.shape), ggamma, gbeta

    return out, vjp


def _relu(arrays, a):
    (x,) = arrays
    mask = x > 0
    out = x * mask

    def vjp(g):
        return (g * mask,)

    return out, vjp


def _maxpool3d(arrays, a: OpAttrs):
    (x,) = arrays
    _check_5d(x, "maxpool3d input")
    k = tuple(a.kernel)
    s = a.stride
    B, C, Z, Y, X = x.shape
    out_sp = [conv_out_extent(n, kk, s, 1, 0) for n, kk in zip((Z, Y, X), k)]
    if min(out_sp) < 1:
        raise ShapeError(f"maxpool3d: window {k} larger than input {x.shape[2:]}")
    Zo, Yo, Xo = out_sp
    st = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, C, Zo, Yo, Xo) + k,
        strides=st[:2] + (st[2] * s, st[3] * s, st[4] * s) + st[2:],
        writeable=False,
    ).reshape(B, C, Zo, Yo, Xo, -1)
    arg = win.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x)
        kz, ky, kx = np.unravel_index(arg, k)
        bi, ci, zi, yi, xi = np.indices(arg.shape, sparse=True)
        np.add.at(gx, (bi, ci, zi * s + kz, yi * s + ky, xi * s + kx), g)
        return (gx,)

    if k == (s, s, s) and Z % s == 0 and Y % s == 0 and X % s == 0:
        # non-overlapping windows: scatter by reshape instead of add.at
        def vjp(g):  # noqa: F811
            onehot = np.zeros((B, C, Zo, Yo, Xo, s**3), dtype=x.dtype)
            np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
            gx = onehot.reshape(B, C, Zo, Yo, Xo, s, s, s).transpose(0, 1, 2, 5, 3, 6, 4, 7)
            return (np.ascontiguousarray(gx).reshape(x.shape),)

    return out, vjp


def _add(arrays, a: OpAttrs):
    shape = arrays[0].shape
    for arr in arrays[1:]:
        if arr.shape != shape:
            raise ShapeError(f"add: shape mismatch {shape} vs {arr.shape}")
    coeffs = a.coeffs if a.coeffs is not None else (1.0,) * len(arrays)
    if len(coeffs) != len(arrays):
        raise ShapeError("add: one coefficient per input required")
    out = arrays[0] * coeffs[0] if coeffs[0] != 1.0 else arrays[0].copy()
    for c, arr in zip(coeffs[1:], arrays[1:]):
        if c == 1.0:
            out += arr
        else:
            out += c * arr

    def vjp(g):
        return tuple(g if c == 1.0 else c * g for c in coeffs)

    return out, vjp


def _concat_channels(arrays, a: OpAttrs):
    ref = arrays[0].shape
    for arr in arrays[1:]:
        if arr.ndim != len(ref) or arr.shape[:1] + arr.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref} and {arr.shape}")
    out = np.concatenate(arrays, axis=1)
    bounds = np.cumsum([0] + [arr.shape[1] for arr in arrays])

    def vjp(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return out, vjp


def _softmax_channels(arrays, a: OpAttrs):
    (x,) = arrays
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return out, vjp


def _sum(arrays, a: OpAttrs):
    (x,) = arrays
    c = 1.0 if a.coeffs is None else a.coeffs[0]
    out = np.asarray(c * x.sum(), dtype=x.dtype)

    def vjp(g):
        return (np.full_like(x, c * float(g)),)

    return out, vjp


_OPS = {
    "conv3d": _conv3d,
    "conv3d_transpose": _conv3d_transpose,
    "batchnorm3d": _batchnorm3d,
    "relu": _relu,
    "maxpool3d": _maxpool3d,
    "add": _add,
    "concat_channels": _concat_channels,
    "softmax_channels": _softmax_channels,
    # scalar reduction used to form losses in tests and gradient checks
    "sum": _sum,
}


# per-kind (default_shapes(attrs), sample_inputs(shapes, rng)) for grad_check
_CHECK_HOOKS: dict[str, tuple[Callable, Callable]] = {}


def register_op(kind: str, fn: Callable, default_shapes: Callable | None = None,
                sample_inputs: Callable | None = None):
    """Register an extra op (``fn(arrays, attrs) -> (out, vjp)``).

    The optional hooks tell :func:`grad_check` how to build valid inputs.
    """
    _OPS[kind] = fn
    if default_shapes is not None and sample_inputs is not None:
        _CHECK_HOOKS[kind] = (default_shapes, sample_inputs)


def op_forward(kind: str, inputs: Sequence[Tensor], attrs: OpAttrs | None = None,
               tape: Tape | None = None) -> Tensor:
    if kind not in _OPS:
        raise ValueError(f"unknown op kind {kind!r}")
    attrs = attrs or OpAttrs()
    arrays = [t.data for t in inputs]
    dtype = arrays[0].dtype
    for t in inputs:
        if t.dtype != dtype:
            raise ShapeError(f"{kind}: mixed dtypes {dtype} and {t.dtype}")
    out, vjp = _OPS[kind](arrays, attrs)
    out = np.asarray(out, dtype=dtype)
    if not math.isfinite(float(out.sum())):
        raise NonFiniteError(f"{kind} produced non-finite values")
    result = Tensor(out)
    if tape is not None and tape.record:
        tape.push(Node(kind, tuple(t.id for t in inputs), attrs, result.id, vjp, out.shape, out.dtype))
    return result


def backward(tape: Tape, loss_id: int, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep; returns ``{param id: gradient}`` for every watched param.

    The loss must be a scalar unless ``seed`` (the upstream gradient) is
    given. Watched parameters the loss does not depend on get zeros.
    """
    stop = None
    for i, node in enumerate(tape.nodes):
        if node.out == loss_id:
            stop = i
    if stop is None:
        raise KeyError(f"tensor {loss_id} was not produced on this tape")
    last = tape.nodes[stop]
    if seed is None:
        if last.out_shape != ():
            raise ValueError(f"loss must be a scalar, got shape {last.out_shape}")
        seed = np.ones((), dtype=last.out_dtype)
    grads: dict[int, np.ndarray] = {loss_id: np.asarray(seed)}
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        for tid, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            prev = grads.get(tid)
            grads[tid] = gi if prev is None else prev + gi
    result = {}
    for pid, p in tape.params.items():
        g = grads.get(pid)
        result[pid] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return result


def grad_wrt(tape: Tape, loss_id: int, tensors: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    """Gradients with respect to arbitrary tensors (inputs included)."""
    saved = dict(tape.params)
    try:
        tape.params = {t.id: t for t in tensors}
        g = backward(tape, loss_id, seed)
    finally:
        tape.params = saved
    return [g[t.id] for t in tensors]


# ------------------------------------------------------- gradient check ---

def _default_shapes(kind: str, attrs: OpAttrs):
    if kind in _CHECK_HOOKS:
        return _CHECK_HOOKS[kind][0](attrs)
    k = tuple(attrs.kernel)
    if kind == "conv3d":
        return [(2, 2, 5, 5, 5), (3, 2) + k, (3,)]
    if kind == "conv3d_transpose":
        return [(2, 2, 3, 3, 3), (2, 3) + k, (3,)]
    if kind == "batchnorm3d":
        return [(3, 2, 3, 3, 3), (2,), (2,)]
    if kind == "maxpool3d":
        return [(2, 2, 4, 4, 4)]
    if kind in ("add", "concat_channels"):
        return [(2, 2, 3, 3, 3), (2, 2, 3, 3, 3)]
    return [(2, 4, 3, 3, 3)]


def _sample_inputs(kind, shapes, rng):
    if kind in _CHECK_HOOKS:
        return [np.asarray(a, dtype=np.float64) for a in _CHECK_HOOKS[kind][1](shapes, rng)]
    arrays = []
    for i, shp in enumerate(shapes):
        a = rng.standard_normal(shp)
        if kind == "relu":
            # keep clear of the kink
            a = np.sign(a) * (0.1 + np.abs(a))
        if kind == "maxpool3d":
            # distinct values: no ties inside a window
            a = rng.permutation(a.size).reshape(shp) / a.size + 0.01 * a
        if kind == "batchnorm3d" and i == 1:
            a = 1.0 + 0.5 * rng.random(shp)
        arrays.append(a.astype(np.float64))
    return arrays


def grad_check(kind: str, attrs: OpAttrs | None = None, shapes=None, seed: int = 0,
               step: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients (float64).

    The probe loss is ``sum(out * R)`` with a fixed random ``R``; the relative
    error floor is 1e-8.
    """
    attrs = attrs or OpAttrs()
    if kind == "batchnorm3d":
        attrs = replace(attrs, training=True, running_mean=None, running_var=None)
    shapes = shapes or _default_shapes(kind, attrs)
    if sum(int(np.prod(s)) for s in shapes) > 2000:
        raise ValueError("grad_check shapes exceed 2000 elements")
    rng = np.random.default_rng(seed)
    arrays = _sample_inputs(kind, shapes, rng)
    fn = _OPS[kind]
    out, vjp = fn(arrays, attrs)
    out = np.asarray(out, dtype=np.float64)
    R = rng.standard_normal(out.shape)
    analytic = vjp(R)
    worst = 0.0
    for i, arr in enumerate(arrays):
        ga = analytic[i]
        if ga is None:
            continue
        ga = np.broadcast_to(np.asarray(ga, dtype=np.float64), arr.shape)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            plus = np.asarray(fn(arrays, attrs)[0], dtype=np.float64)
            flat[j] = orig - step
            minus = np.asarray(fn(arrays, attrs)[0], dtype=np.float64)
            flat[j] = orig
            numeric = float(((plus - minus) * R).sum()) / (2 * step)
            err = abs(float(ga.reshape(-1)[j]) - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
