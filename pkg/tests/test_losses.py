import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adiposeg.autodiff import ShapeError, Tensor
from adiposeg.losses import LossWeights, RMSprop, focal_loss, multi_metric_loss, one_hot, rmsprop_step, seg_loss_grad


def _probs(shape, seed):
    z = np.random.default_rng(seed).standard_normal(shape)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_focal_single_voxel_value():
    p = np.array([[0.5, 0.5]]).reshape(1, 2, 1)
    t = np.array([[1.0, 0.0]]).reshape(1, 2, 1)
    assert focal_loss(p, t, gamma=2.0) == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert round(focal_loss(p, t, 2.0), 6) == 0.173287


def test_focal_perfect_and_gamma_zero():
    labels = np.random.default_rng(0).integers(0, 4, (2, 3, 3, 3))
    t = one_hot(labels, 4, np.float64)
    assert focal_loss(t, t) == pytest.approx(0.0, abs=1e-5)
    p = _probs(t.shape, 1)
    ce = -np.log(np.clip((p * t).sum(axis=1), 1e-7, 1)).mean()
    assert focal_loss(p, t, gamma=0.0) == pytest.approx(ce, rel=1e-12)


def test_multi_metric_hand_cases():
    t = one_hot(np.array([[0, 1]]), 2, np.float64)  # 2 voxels, classes 0 and 1
    assert multi_metric_loss(t, t) == pytest.approx(0.0, abs=1e-5)
    swapped = t[:, ::-1]
    assert multi_metric_loss(swapped, t) == pytest.approx(2.0, abs=1e-5)
    # uniform probabilities on a pure-class target: softTPR = 0.25 and
    # softJaccard = 0.25n / (0.25n + n - 0.25n) = 0.25, only class 2 present
    t = one_hot(np.full((1, 8), 2), 4, np.float64)
    u = np.full_like(t, 0.25)
    assert multi_metric_loss(u, t) == pytest.approx(1.5, abs=1e-6)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        focal_loss(np.ones((1, 4, 2)), np.ones((1, 3, 2)))
    with pytest.raises(ShapeError):
        multi_metric_loss(np.ones((1, 4, 2)), np.ones((1, 4, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 4.0), st.sampled_from([(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1), (0.5, 2, 0.3)]))
def test_total_loss_nonnegative_and_zero_iff_perfect(seed, gamma, lams):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, (2, 3, 3, 3))
    t = one_hot(labels, 4, np.float64)
    w = LossWeights(*lams, gamma=gamma)
    value, grad, parts = seg_loss_grad(_probs(t.shape, seed), t, w)
    assert value >= 0 and all(v >= -1e-12 for v in parts.values())
    assert grad.shape == t.shape
    assert seg_loss_grad(t, t, w)[0] == pytest.approx(0.0, abs=1e-5)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)
    with pytest.raises(ValueError):
        LossWeights(gamma=-1)


def test_rmsprop_worked_value():
    new, state = rmsprop_step(np.array(1.0), np.array(1.0), np.array(0.0), lr=0.1, rho=0.9, eps=1e-8)
    assert float(state) == pytest.approx(0.1)
    assert float(new) == pytest.approx(1 - 0.1 / math.sqrt(0.1 + 1e-8), abs=1e-12)
    assert round(float(new), 6) == 0.683772


def test_rmsprop_zero_gradient_decays_state():
    p = np.array([1.0, -2.0])
    new, state = rmsprop_step(p, np.zeros(2), np.array([0.5, 2.0]), lr=0.1, rho=0.9)
    assert np.array_equal(new, p)
    np.testing.assert_allclose(state, [0.45, 1.8])
    with pytest.raises(ShapeError):
        rmsprop_step(p, np.zeros(3), np.zeros(2))


def test_rmsprop_class_is_deterministic():
    def run():
        params = {"w": Tensor(np.linspace(-1, 1, 6).astype(np.float32))}
        opt = RMSprop(lr=0.01)
        rng = np.random.default_rng(0)
        for _ in range(5):
            opt.step(params, {"w": rng.standard_normal(6).astype(np.float32)})
        return params["w"].data
    assert run().tobytes() == run().tobytes()
    with pytest.raises(ValueError):
        RMSprop(lr=0)
