import numpy as np
import pytest
from scipy import ndimage

from adiposeg.phantom import (
    BG,
    LT,
    SAT,
    VAT,
    CohortConfig,
    Covariates,
    PhantomSpec,
    _bias_field,
    check_ring,
    generate_cohort,
    generate_phantom,
    spec_for,
    split_counts,
)
from adiposeg.seeds import rng_for


@pytest.fixture(scope="module")
def fse_phantom():
    return generate_phantom(spec_for("fse", Covariates(1, 40, 31.0)), seed=5)


def test_classes_partition_and_types(fse_phantom):
    vol, mask, cov = fse_phantom
    assert set(np.unique(mask.labels)) == {BG, LT, VAT, SAT}
    assert np.bincount(mask.labels.ravel(), minlength=4).sum() == mask.labels.size
    assert vol.data.shape == (1, 96, 64, 64) and vol.spacing == (10.0, 2.0, 2.0)
    assert cov == dict(sex=1, age=40, bmi=31.0)


def test_sat_ring_encloses_interior(fse_phantom):
    labels = fse_phantom[1].labels
    check_ring(labels)
    for z in range(labels.shape[0]):
        sl = labels[z]
        inner = (sl == LT) | (sl == VAT)
        if not inner.any():
            continue
        # filling the SAT ring's holes must cover every interior voxel
        filled = ndimage.binary_fill_holes(sl == SAT)
        assert filled[inner].all(), z
        sat_parts = ndimage.label(sl == SAT, structure=np.ones((3, 3)))[1]
        assert sat_parts == 1, z


def test_broken_ring_is_detected():
    labels = np.zeros((1, 10, 10), np.uint8)
    labels[0, 2:8, 2:8] = SAT
    labels[0, 3:7, 3:7] = LT
    check_ring(labels)
    labels[0, 2, 4] = BG
    with pytest.raises(ValueError):
        check_ring(labels)


def test_determinism():
    spec = spec_for("dixon", Covariates(0, 60, 24.0), shape=(40, 96, 96))
    a, b = generate_phantom(spec, 3), generate_phantom(spec, 3)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].labels.tobytes() == b[1].labels.tobytes()
    c = generate_phantom(spec, 4)
    assert c[0].data.tobytes() != a[0].data.tobytes()


def test_noise_free_levels_are_constant():
    spec = spec_for("fse", Covariates(0, 30, 26.0), noise_sigma=0.0, bias_amplitude=0.0)
    vol, mask, _ = generate_phantom(spec, 1)
    for c in (BG, LT, VAT, SAT):
        vals = np.unique(vol.data[0][mask.labels == c])
        assert len(vals) == 1 and vals[0] == np.float32(spec.intensities[c][0])


def test_dixon_channel_contrast():
    spec = spec_for("dixon", Covariates(1, 50, 28.0), shape=(40, 96, 96))
    vol, mask, _ = generate_phantom(spec, 2)
    fat, water = vol.data
    assert fat[mask.labels == SAT].mean() > fat[mask.labels == LT].mean()
    assert water[mask.labels == LT].mean() > water[mask.labels == SAT].mean()


def test_bias_field_positive_and_smooth():
    f = _bias_field((32, 32, 32), 2, 0.5, rng_for(0, "bias"))
    assert f.min() > 0
    assert max(np.abs(np.diff(f, axis=a)).max() for a in range(3)) < 0.2


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(intensities={BG: (0.5,), LT: (0.3,), VAT: (0.9,), SAT: (0.9,)})
    with pytest.raises(ValueError):
        PhantomSpec(sat_mm=1.0)
    with pytest.raises(ValueError):
        spec_for("ct", Covariates(0, 30, 25.0))


def test_split_counts():
    assert split_counts(50, (0.7, 0.1, 0.2)) == (35, 5, 10)
    assert split_counts(55, (40 / 55, 5 / 55, 10 / 55)) == (40, 5, 10)
    assert sum(split_counts(13, (0.7, 0.1, 0.2))) == 13


def test_cohort_splits_and_folds():
    cohort = generate_cohort(CohortConfig(n_subjects=50, n_folds=4, seed=11))
    for k in range(4):
        tr, va, te = (cohort.split(k, w) for w in ("train", "val", "test"))
        assert (len(tr), len(va), len(te)) == (35, 5, 10)
        assert sorted(tr + va + te) == list(range(50))
        # sex balance within one subject of the proportional share
        females = sum(s["sex"] for s in cohort.subjects)
        for idx in (tr, va, te):
            got = sum(cohort.subjects[i]["sex"] for i in idx)
            assert abs(got - females * len(idx) / 50) <= 1
    assert cohort.split(0, "test") != cohort.split(1, "test")


def test_cohort_regeneration_is_identical():
    cfg = CohortConfig(n_subjects=12, seed=2)
    a, b = generate_cohort(cfg), generate_cohort(cfg)
    assert a.manifest() == b.manifest()
    with pytest.raises(ValueError):
        CohortConfig(n_subjects=9)
    with pytest.raises(ValueError):
        CohortConfig(fractions=(0.5, 0.5, 0.5))
