"""Segmentation losses and the RMSprop update.

All losses take class probabilities ``probs`` [N, K, ...] and a one-hot
``target`` of the same shape and return plain floats; ``seg_loss_grad``
also returns the gradient with respect to ``probs``. The combined loss is
registered on the autodiff tape as op kind ``"seg_loss"``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import OpAttrs, ShapeError, register_op

P_MIN, P_MAX = 1e-7, 1.0 - 1e-7
JACCARD_EPS = 1e-6


def one_hot(labels: np.ndarray, n_classes: int = 4, dtype=np.float32) -> np.ndarray:
    """[N, ...] integer labels -> [N, K, ...] one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes) + labels.shape[1:], dtype=dtype)
    for c in range(n_classes):
        out[:, c] = labels == c
    return out


def _check(probs, target):
    if probs.shape != target.shape:
        raise ShapeError(f"probs {probs.shape} and target {target.shape} differ")
    if probs.ndim < 2:
        raise ShapeError("probs must be [N, K, ...]")


def _voxels(probs):
    return probs.size // probs.shape[1]


def focal_loss(probs, target, gamma: float = 2.0) -> float:
    """Mean over voxels of ``-(1 - p_t)**gamma * log(p_t)``."""
    return _focal(np.asarray(probs), np.asarray(target), gamma)[0]


def _focal(probs, target, gamma):
    _check(probs, target)
    p = np.clip(probs, P_MIN, P_MAX)
    q = 1.0 - p
    term = -(q**gamma) * np.log(p)
    nvox = _voxels(probs)
    value = float((term * target).sum()) / nvox
    # d/dp of -(1-p)^g log p, zero where the clamp is active
    if gamma == 0:
        d = -1.0 / p
    else:
        d = gamma * q ** (gamma - 1) * np.log(p) - q**gamma / p
    inside = (probs >= P_MIN) & (probs <= P_MAX)
    grad = d * target * inside / nvox
    return value, grad


def _class_axes(probs):
    return (0,) + tuple(range(2, probs.ndim))


def _multi(probs, target):
    """Per present class: (1 - softTPR), (1 - softJaccard), and their grads."""
    _check(probs, target)
    ax = _class_axes(probs)
    inter = (probs * target).sum(axis=ax)
    psum = probs.sum(axis=ax)
    tsum = target.sum(axis=ax)
    present = tsum > 0
    k = max(int(present.sum()), 1)
    union = psum + tsum - inter + JACCARD_EPS
    tpr = inter / (tsum + JACCARD_EPS)
    jac = inter / union
    shape = (1, -1) + (1,) * (probs.ndim - 2)
    w = (present / k).reshape(shape)
    tpr_loss = float(((1.0 - tpr) * present).sum() / k)
    jac_loss = float(((1.0 - jac) * present).sum() / k)
    g_tpr = -w * target / (tsum + JACCARD_EPS).reshape(shape)
    u = union.reshape(shape)
    g_jac = -w * (target * u - inter.reshape(shape) * (1.0 - target)) / u**2
    return tpr_loss, jac_loss, g_tpr, g_jac


def multi_metric_loss(probs, target) -> float:
    """``(1 - softTPR) + (1 - softJaccard)``, averaged over classes present
    in the target."""
    t, j, _, _ = _multi(np.asarray(probs), np.asarray(target))
    return t + j


@dataclass(frozen=True)
class LossWeights:
    focal: float = 1.0
    tpr: float = 1.0
    jaccard: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        ws = (self.focal, self.tpr, self.jaccard)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("loss weights must be >= 0 with at least one > 0")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")


def seg_loss_grad(probs, target, weights: LossWeights = LossWeights()):
    """Combined loss value, its gradient w.r.t. ``probs``, and the parts."""
    probs = np.asarray(probs)
    target = np.asarray(target, dtype=probs.dtype)
    f, gf = _focal(probs, target, weights.gamma)
    t, j, gt, gj = _multi(probs, target)
    value = weights.focal * f + weights.tpr * t + weights.jaccard * j
    grad = weights.focal * gf + weights.tpr * gt + weights.jaccard * gj
    return value, grad.astype(probs.dtype), {"focal": f, "tpr": t, "jaccard": j}


def _seg_loss_op(arrays, a: OpAttrs):
    probs, target = arrays
    lf, lt, lj = a.coeffs if a.coeffs is not None else (1.0, 1.0, 1.0)
    value, grad, _ = seg_loss_grad(probs, target, LossWeights(lf, lt, lj, a.gamma))

    def vjp(g):
        return grad * float(g), None

    return np.asarray(value, dtype=probs.dtype), vjp


def _loss_shapes(attrs):
    return [(2, 4, 3, 3, 3), (2, 4, 3, 3, 3)]


def _loss_inputs(shapes, rng):
    shp = shapes[0]
    logits = rng.standard_normal(shp)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    labels = rng.integers(0, shp[1], size=(shp[0],) + shp[2:])
    return [probs, one_hot(labels, shp[1], np.float64)]


register_op("seg_loss", _seg_loss_op, _loss_shapes, _loss_inputs)


class RMSprop:
    """``s <- rho*s + (1-rho)*g**2; p <- p - lr*g/sqrt(s + eps)``."""

    def __init__(self, lr: float = 1e-3, rho: float = 0.9, eps: float = 1e-8):
        if lr <= 0 or not 0 < rho < 1 or eps <= 0:
            raise ValueError("RMSprop needs lr > 0, 0 < rho < 1, eps > 0")
        self.lr, self.rho, self.eps = lr, rho, eps
        self.state: dict = {}

    def step(self, params: dict, grads: dict):
        """``params``: name -> Tensor; ``grads``: name -> array."""
        for name, t in params.items():
            s = self.state.get(name)
            if s is None:
                s = self.state[name] = np.zeros_like(t.data)
            t.data, self.state[name] = rmsprop_step(t.data, grads[name], s, self.lr, self.rho, self.eps)


def rmsprop_step(param, grad, state, lr=1e-3, rho=0.9, eps=1e-8):
    """Functional update; returns ``(new_param, new_state)``."""
    param = np.asarray(param)
    grad = np.asarray(grad, dtype=param.dtype)
    if param.shape != grad.shape or param.shape != np.shape(state):
        raise ShapeError("rmsprop_step: param, grad and state shapes differ")
    state = rho * state + (1.0 - rho) * grad * grad
    state = np.asarray(state, dtype=param.dtype)
    new = param - (lr * grad / np.sqrt(state + eps)).astype(param.dtype)
    return new, state
