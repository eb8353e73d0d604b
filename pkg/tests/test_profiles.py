import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adiposeg.patching import LabelMask
from adiposeg.profiles import (
    ATProfile,
    age_bin,
    bmi_bin,
    compute_profile,
    emit_report,
    group_profiles,
    read_profile_csv,
    resample_profile,
    write_group_csv,
)
from adiposeg.storage import read_mask


def test_liters_arithmetic():
    labels = np.zeros((2, 250, 100), np.uint8)
    labels[0] = 3  # 25,000 SAT voxels in slice 0
    p = compute_profile(LabelMask(labels, (10.0, 2.0, 2.0)))
    assert p.voxel_mm3 == 40.0
    assert p.liters[0, 2] == 1.0
    assert p.percent[0, 2] == 100.0
    assert not p.liters[1].any() and not p.percent[1].any()  # all-BG slice
    np.testing.assert_array_equal(p.z_mm, [0.0, 10.0])


def test_profile_errors():
    with pytest.raises(ValueError):
        compute_profile(np.zeros((2, 2, 2), np.uint8), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        compute_profile(np.full((2, 2, 2), 5, np.uint8), spacing=(1, 1, 1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 8), st.integers(1, 8)),
              elements=st.integers(0, 3)), st.integers(0, 1000))
def test_slice_sums_and_inplane_invariance(labels, seed):
    spacing = (3.0, 1.4, 1.4)
    p = compute_profile(labels, spacing)
    for j, c in enumerate((1, 2, 3)):
        assert p.counts[:, j].sum() == (labels == c).sum()
        assert p.liters[:, j].sum() == pytest.approx((labels == c).sum() * 3.0 * 1.4 * 1.4 * 1e-6, rel=1e-12)
    body = p.counts.sum(axis=1)
    np.testing.assert_allclose(p.percent.sum(axis=1)[body > 0], 100.0)
    rng = np.random.default_rng(seed)
    flat = labels.reshape(labels.shape[0], -1)
    shuffled = np.stack([row[rng.permutation(row.size)] for row in flat]).reshape(labels.shape)
    q = compute_profile(shuffled, spacing)
    assert np.array_equal(p.counts, q.counts) and np.array_equal(p.percent, q.percent)


def _flat_profile(liters_sat, slices=5):
    counts = np.zeros((slices, 3), np.int64)
    counts[:, 2] = 1
    liters = np.zeros((slices, 3))
    liters[:, 2] = liters_sat
    percent = np.zeros((slices, 3))
    percent[:, 2] = 100.0
    return ATProfile(np.arange(slices, dtype=float), counts, liters, percent, 1.0)


def test_group_arithmetic():
    cov = [dict(sex=0, age=41, bmi=22.0), dict(sex=0, age=47, bmi=23.0), dict(sex=1, age=63, bmi=31.0)]
    s = group_profiles([_flat_profile(1.0), _flat_profile(3.0), _flat_profile(2.5)], cov, by=("sex", "age"),
                       n_points=7, ids=["a", "b", "c"])
    pair = s.groups[("male", "40-49")]
    assert pair["n"] == 2 and pair["members"] == ["a", "b"]
    np.testing.assert_allclose(pair["liters_mean"][:, 2], 2.0)
    np.testing.assert_allclose(pair["liters_std"][:, 2], np.sqrt(2.0))
    single = s.groups[("female", "60-69")]
    np.testing.assert_allclose(single["liters_mean"][:, 2], 2.5)
    assert not single["liters_std"].any()
    assert ("male", "20-29") not in s.groups
    assert any(w["group"] == ["male", "20-29"] for w in s.warnings)
    same = group_profiles([_flat_profile(1.5)] * 3, [cov[0]] * 3, by=("sex",))
    assert not same.groups[("male",)]["liters_std"].any()


def test_group_means_within_envelope():
    rng = np.random.default_rng(0)
    profs = []
    for n in (8, 11, 14):
        labels = rng.integers(0, 4, (n, 6, 6)).astype(np.uint8)
        profs.append(compute_profile(labels, (5.0, 2.0, 2.0)))
    res = np.stack([resample_profile(p, 50)[0] for p in profs])
    s = group_profiles(profs, [dict(sex=1, age=30, bmi=27.0)] * 3, by=("bmi",), n_points=50)
    m = s.groups[("25-30",)]["liters_mean"]
    assert (m >= res.min(axis=0) - 1e-15).all() and (m <= res.max(axis=0) + 1e-15).all()


def test_bins():
    assert age_bin(20) == "20-29" and age_bin(79) == "70-79"
    assert bmi_bin(24.9) == "<25" and bmi_bin(25.0) == "25-30" and bmi_bin(30.0) == ">=30"
    with pytest.raises(ValueError):
        group_profiles([_flat_profile(1.0)], [dict(sex=0, age=30, bmi=20)], by=("height",))


def test_emit_report_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    mask = LabelMask(rng.integers(0, 4, (7, 9, 10)), (10.0, 2.0, 2.0), (1.0, 2.0, 3.0), "A")
    p = compute_profile(mask)
    paths = emit_report("case1", mask, p, tmp_path / "out")
    back = read_mask(paths["mask"])
    assert back.labels.tobytes() == mask.labels.tobytes() and back.spacing == mask.spacing
    rows = read_profile_csv(paths["profile"])
    assert sum(len(v[0]) for v in rows.values()) == 7 * 3
    for name, total in p.totals().items():
        assert rows[name][1].sum() == pytest.approx(total, rel=1e-12)


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    mask = LabelMask(np.zeros((1, 2, 2)))
    with pytest.raises(OSError):
        emit_report("c", mask, compute_profile(mask), blocker / "sub")


def test_group_csv(tmp_path):
    s = group_profiles([_flat_profile(1.0)], [dict(sex=0, age=30, bmi=20)], by=("sex",), n_points=4)
    path = write_group_csv(s, tmp_path / "g.csv")
    assert len(path.read_text().strip().splitlines()) == 1 + 4 * 3
