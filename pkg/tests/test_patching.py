import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adiposeg.patching import (
    PATCH,
    LabelMask,
    Volume,
    extract_label_patches,
    extract_patches,
    normalize_volume,
    patch_grid,
    reassemble,
)


def _vol(shape, seed=0, c=1):
    return Volume(np.random.default_rng(seed).random((c,) + tuple(shape)).astype(np.float32))


def test_normalize_examples():
    data = np.full((2, 2, 2, 2), 100.0, np.float32)
    data[0, 0, 0, 1] = 300
    data[0, 0, 0, 0] = 200
    out = normalize_volume(Volume(data)).data
    assert out[0, 0, 0, 0] == 0.5
    assert out[0].min() == 0.0 and out[0].max() == 1.0
    assert not out[1].any()  # constant channel


def test_normalize_rejects_nan():
    data = np.zeros((1, 2, 2, 2), np.float32)
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        normalize_volume(Volume(data))


def test_volume_and_mask_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((3, 2, 2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 2, 2, 2)), channels="CT")
    with pytest.raises(ValueError):
        LabelMask(np.full((2, 2, 2), 4))


def _count_oracle(extent, stride):
    # smallest n with (n - 1) * stride + 32 >= extent
    n = 1
    while (n - 1) * stride + PATCH < extent:
        n += 1
    return n


def test_patch_count_and_positions():
    b = extract_patches(_vol((64, 64, 64)), stride=16)
    assert len(b) == ((64 - 32) // 16 + 1) ** 3 == 27
    assert b.patches.shape == (27, 1, 32, 32, 32)
    b = extract_patches(_vol((32, 32, 32)), stride=16)
    assert len(b) == 1
    np.testing.assert_array_equal(b.positions[0], [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        extract_patches(_vol((32, 32, 32)), stride=0)
    with pytest.raises(ValueError):
        extract_patches(_vol((32, 32, 32)), stride=33)


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.integers(1, 90)] * 3), st.integers(1, 32))
def test_grid_covers_every_voxel(shape, stride):
    starts, padded = patch_grid(shape, stride)
    assert len(starts) == np.prod([_count_oracle(n, stride) for n in shape])
    assert (starts % stride == 0).all()
    cover = np.zeros(padded, bool)
    for z, y, x in starts:
        cover[z:z + PATCH, y:y + PATCH, x:x + PATCH] = True
    assert cover[:shape[0], :shape[1], :shape[2]].all()


def test_coverage_70():
    b = extract_patches(_vol((70, 70, 70)), stride=16)
    acc = reassemble(np.ones((len(b), 1, 32, 32, 32)), b)[0]
    assert acc.shape == (1, 70, 70, 70)
    assert ((b.positions >= 0) & (b.positions <= 1)).all()


def test_reassemble_constant_and_tie_rule():
    b = extract_patches(_vol((48, 40, 33)), stride=16)
    sat = np.zeros((len(b), 4, 32, 32, 32), np.float32)
    sat[:, 3] = 1
    probs, mask = reassemble(sat, b)
    assert (mask == 3).all() and probs.shape == (4, 48, 40, 33)

    b = extract_patches(_vol((32, 32, 48)), stride=16)
    assert len(b) == 2
    p = np.zeros((2, 4, 32, 32, 32), np.float32)
    p[0, 0] = 1
    p[1, 1] = 1
    probs, mask = reassemble(p, b)
    np.testing.assert_array_equal(probs[:, :, :, 16:32], np.broadcast_to([[[[.5]]], [[[.5]]], [[[0]]], [[[0]]]],
                                                                         (4, 32, 32, 16)))
    assert (mask[:, :, 16:32] == 0).all()
    assert (mask[:, :, 32:] == 1).all()


def test_reassemble_errors():
    b = extract_patches(_vol((32, 32, 48)), stride=16)
    with pytest.raises(ValueError):
        reassemble(np.zeros((3, 4, 32, 32, 32)), b)
    with pytest.raises(ValueError):
        reassemble(np.zeros((2, 4, 16, 16, 16)), b)
    with pytest.raises(ValueError):
        reassemble(np.zeros((2, 4, 32, 32, 32)), b, target_shape=(64, 64, 64))


def test_stride_32_is_block_concatenation():
    v = normalize_volume(_vol((64, 64, 64), seed=3))
    b = extract_patches(v, stride=32)
    probs, _ = reassemble(b.patches, b)
    assert np.array_equal(probs, v.data)


@settings(max_examples=15, deadline=None)
@given(st.tuples(*[st.integers(20, 70)] * 3), st.sampled_from([8, 16, 24, 32]), st.integers(0, 1000))
def test_identity_roundtrip_simplex_and_counts(shape, stride, seed):
    v = normalize_volume(_vol(shape, seed))
    b = extract_patches(v, stride=stride)
    probs, _ = reassemble(b.patches, b)
    np.testing.assert_allclose(probs, v.data, rtol=0, atol=1e-6)

    rng = np.random.default_rng(seed)
    z = rng.random((len(b), 4, 32, 32, 32))
    probs, mask = reassemble(z / z.sum(axis=1, keepdims=True), b)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)
    assert np.bincount(mask.ravel(), minlength=4).sum() == np.prod(shape)


def test_label_patches_pad_with_background():
    labels = np.full((40, 40, 40), 2, np.uint8)
    b = extract_patches(_vol((40, 40, 40)), stride=16)
    lp = extract_label_patches(labels, b)
    assert lp.shape == (len(b), 32, 32, 32)
    assert (lp[-1, -1, -1, -1] == 0) and (lp[0] == 2).all()
