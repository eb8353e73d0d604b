import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adiposeg.labeler import (
    FcmState,
    LabelerConfig,
    SnakeWeights,
    fcm_cluster,
    label_volume,
    partial_volume_correct,
    snake_split,
)
from adiposeg.metrics import evaluate_mask
from adiposeg.patching import Volume
from adiposeg.phantom import BG, LT, SAT, VAT, Covariates, generate_phantom, spec_for


def fcm_oracle(x, centers, m=2.0, iters=500):
    """Plain per-sample FCM loop written from the update formulas."""
    x = [float(v) for v in x]
    c = [float(v) for v in centers]
    for _ in range(iters):
        u = []
        for xi in x:
            d = [abs(xi - cj) for cj in c]
            if 0.0 in d:
                u.append([1.0 if j == d.index(0.0) else 0.0 for j in range(len(c))])
                continue
            u.append([1.0 / sum((d[i] / d[j]) ** (2 / (m - 1)) for j in range(len(c))) for i in range(len(c))])
        c = [sum(ui[i] ** m * xi for ui, xi in zip(u, x)) / sum(ui[i] ** m for ui in u) for i in range(len(c))]
    return np.array(c)


def test_fcm_k1_is_mean():
    x = np.random.default_rng(0).random(50)
    s = fcm_cluster(x, k=1)
    assert s.centers[0, 0] == pytest.approx(x.mean())
    assert (s.memberships == 1).all()


def test_fcm_two_populations_against_oracle():
    rng = np.random.default_rng(1)
    x = np.concatenate([np.full(40, 0.1), np.full(60, 0.9)]) + rng.normal(0, 0.01, 100)
    s = fcm_cluster(x, k=2, tol=1e-10, max_iter=1000)
    ref = np.sort(fcm_oracle(x, [0.2, 0.8]))
    np.testing.assert_allclose(s.centers[:, 0], ref, atol=1e-7)
    assert np.abs(s.centers[:, 0] - [0.1, 0.9]).max() < 0.01
    assert (s.memberships.max(axis=1) >= 0.99).all()


def test_fcm_singularity_rule():
    s = fcm_cluster(np.array([0.0, 0.0, 1.0, 1.0]), k=2)
    np.testing.assert_array_equal(s.memberships, [[1, 0], [1, 0], [0, 1], [0, 1]])


def test_fcm_errors():
    with pytest.raises(ValueError):
        fcm_cluster(np.ones(5), k=0)
    with pytest.raises(ValueError):
        fcm_cluster(np.ones(5), m=1.0)
    with pytest.raises(ValueError):
        fcm_cluster(np.array([0.0, np.nan, 1.0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_fcm_rows_sum_and_objective_monotone(seed, k):
    x = np.random.default_rng(seed).random((200, 2))
    s = fcm_cluster(x, k=k)
    np.testing.assert_allclose(s.memberships.sum(axis=1), 1, atol=1e-6)
    obj = np.array(s.objective)
    assert (np.diff(obj) <= 1e-9 * obj[:-1]).all()
    assert (np.diff(s.centers[:, 0]) >= 0).all()


def test_partial_volume_cases():
    rng = np.random.default_rng(0)
    hard = rng.integers(0, 3, 27)
    u = np.eye(3)[hard]
    s = FcmState(np.zeros((3, 1)), u, 2.0)
    assert np.array_equal(partial_volume_correct(s, (3, 3, 3)), hard.reshape(3, 3, 3))
    u = np.eye(3)[np.full(27, 2)]
    u[13] = [0.35, 0.4, 0.25]  # ambiguous center, neighbours all AT
    s = FcmState(np.zeros((3, 1)), u, 2.0)
    assert partial_volume_correct(s, (3, 3, 3))[1, 1, 1] == 2
    assert partial_volume_correct(s, (3, 3, 3), threshold=0.0)[1, 1, 1] == 1


def _annulus(n=64, r_out=26, r_in=20, blobs=((0, 0, 4), (6, -5, 3))):
    yy, xx = np.mgrid[:n, :n] - (n - 1) / 2
    r = np.hypot(yy, xx)
    body = r <= r_out
    sat = body & (r > r_in)
    vat = np.zeros_like(body)
    for cy, cx, br in blobs:
        vat |= np.hypot(yy - cy, xx - cx) <= br
    return body, sat, vat


def test_snake_on_ideal_slice():
    body, sat, vat = _annulus()
    s, v, info = snake_split(sat | vat, body)
    assert not (s & v).any() and np.array_equal(s | v, sat | vat)
    truth = np.where(sat, SAT, np.where(vat, VAT, BG))
    r = evaluate_mask(np.where(s, SAT, np.where(v, VAT, BG))[None], truth[None])
    assert r.dice("SAT") >= 0.95 and r.dice("VAT") >= 0.95
    assert info["converged"] or info["fallback"]


def test_snake_ring_only_and_empty():
    body, sat, _ = _annulus(blobs=())
    s, v, _ = snake_split(sat, body)
    assert not v.any() and np.array_equal(s, sat)
    empty = np.zeros_like(body)
    s, v, _ = snake_split(empty, body)
    assert not s.any() and not v.any()


def test_snake_rotation_equivariance():
    body, sat, vat = _annulus(blobs=((3, -9, 4), (-5, 8, 3)))
    s, v, _ = snake_split(sat | vat, body)
    s90, v90, _ = snake_split(np.rot90(sat | vat), np.rot90(body))
    assert np.array_equal(s90, np.rot90(s)) and np.array_equal(v90, np.rot90(v))


def test_snake_weight_validation():
    with pytest.raises(ValueError):
        SnakeWeights(n_points=10)
    with pytest.raises(ValueError):
        SnakeWeights(alpha=-1)


def _phantom(seed, **kw):
    spec = spec_for("fse", Covariates(seed % 2, 45, 24.0 + 3 * seed), shape=(24, 64, 64), **kw)
    return generate_phantom(spec, seed)


@pytest.mark.parametrize("seed", [0, 1])
def test_label_volume_noise_free(seed):
    vol, truth, _ = _phantom(seed, noise_sigma=0.0, bias_amplitude=0.0)
    mask, log = label_volume(vol)
    r = evaluate_mask(mask, truth)
    for c in ("BG", "LT", "VAT", "SAT"):
        assert r.dice(c) >= 0.99, (c, r.dice(c))
    assert log["slices"]


def test_label_volume_default_noise_and_partition():
    vol, truth, _ = _phantom(2)
    mask, _ = label_volume(vol)
    r = evaluate_mask(mask, truth)
    for c in ("BG", "LT", "VAT", "SAT"):
        assert r.dice(c) >= 0.95, (c, r.dice(c))
    again, _ = label_volume(vol)
    assert np.array_equal(mask.labels, again.labels)


def test_label_volume_empty_body():
    vol = Volume(np.full((1, 4, 16, 16), 0.03, np.float32))
    mask, _ = label_volume(vol)
    assert (mask.labels == BG).all()
    with pytest.raises(ValueError):
        label_volume(vol, LabelerConfig(k=4))


def test_label_volume_classes_are_valid():
    vol, _, _ = _phantom(3)
    mask, _ = label_volume(vol)
    assert set(np.unique(mask.labels)) <= {BG, LT, VAT, SAT}
    assert (mask.labels == LT).any()
