"""Synthetic torso phantoms with known BG / LT / VAT / SAT labels.

Each axial slice of the torso is star-shaped around the slice center: the
body outline is a perturbed ellipse, the SAT ring is the band between the
outline and an inner contour pulled in by the local SAT thickness, and
VAT blobs sit in the abdominal slab, kept a few voxels clear of the ring.
Everything is described in mm so the two acquisition styles share one
bounding box.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .patching import LabelMask, Volume
from .seeds import derive_seed, rng_for

BG, LT, VAT, SAT = 0, 1, 2, 3
MIN_RING_PX = 2.5
VAT_MARGIN_PX = 3.0

STYLES = {
    # single-channel T1 FSE, coarse slices
    "fse": dict(
        shape=(96, 64, 64), spacing=(10.0, 2.0, 2.0), channels="T1-FSE",
        intensities={BG: (0.03,), LT: (0.35,), VAT: (0.9,), SAT: (0.9,)},
        noise_sigma=0.03, bias_amplitude=0.15,
    ),
    # same geometry, stronger field inhomogeneity and flatter lean/fat contrast
    "fse-3t": dict(
        shape=(96, 64, 64), spacing=(10.0, 2.0, 2.0), channels="T1-FSE",
        intensities={BG: (0.05,), LT: (0.55,), VAT: (0.85,), SAT: (0.85,)},
        noise_sigma=0.05, bias_amplitude=0.5,
    ),
    # fat + water channels, thin slices
    "dixon": dict(
        shape=(128, 96, 96), spacing=(3.0, 1.4, 1.4), channels="Dixon-fat+water",
        intensities={BG: (0.02, 0.02), LT: (0.12, 0.8), VAT: (0.9, 0.1), SAT: (0.9, 0.1)},
        noise_sigma=0.03, bias_amplitude=0.15,
    ),
}


@dataclass
class Covariates:
    sex: int  # 0 male, 1 female
    age: int
    bmi: float


@dataclass
class PhantomSpec:
    shape: tuple = (96, 64, 64)
    spacing: tuple = (10.0, 2.0, 2.0)
    channels: str = "T1-FSE"
    intensities: dict = field(default_factory=lambda: dict(STYLES["fse"]["intensities"]))
    noise_sigma: float = 0.03
    bias_amplitude: float = 0.15
    bias_order: int = 2
    body_z: tuple = (0.06, 0.94)  # torso slab as fractions of Z
    abdomen: tuple = (0.35, 0.75)  # VAT slab as fractions of the torso slab
    half_width_mm: float = 42.0  # mean body half-axes before shape modulation
    half_depth_mm: float = 31.0
    sat_mm: float | None = None  # base SAT thickness; None derives it from the BMI
    vat_blobs: int | None = None  # None derives the count from BMI, sex and age
    covariates: Covariates = field(default_factory=lambda: Covariates(0, 50, 25.0))
    cohort: str = ""

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.intensities = {int(k): tuple(float(x) for x in v) for k, v in self.intensities.items()}
        if isinstance(self.covariates, dict):
            self.covariates = Covariates(**self.covariates)
        n_ch = 1 if self.channels == "T1-FSE" else 2
        if sorted(self.intensities) != [BG, LT, VAT, SAT]:
            raise ValueError("intensities need an entry for each of the four classes")
        if any(len(v) != n_ch for v in self.intensities.values()):
            raise ValueError(f"{self.channels} needs {n_ch} intensity value(s) per class")
        fat = {k: v[0] for k, v in self.intensities.items()}
        if not (min(fat[VAT], fat[SAT]) > fat[LT] > fat[BG]):
            raise ValueError("fat-channel means must order adipose > lean > background")
        if min(self.spacing) <= 0 or min(self.shape) < 8:
            raise ValueError("spacing must be positive and every extent at least 8 voxels")
        if self.noise_sigma < 0 or self.bias_amplitude < 0:
            raise ValueError("noise and bias amplitude must be non-negative")
        if self.sat_mm is not None and self.sat_mm < MIN_RING_PX * max(self.spacing[1:]):
            raise ValueError(f"SAT thickness {self.sat_mm} mm is below {MIN_RING_PX} voxels; "
                             "the ring would not enclose the interior")

    @property
    def n_channels(self):
        return 1 if self.channels == "T1-FSE" else 2


def spec_for(style: str, covariates: Covariates, cohort: str = "", **overrides) -> PhantomSpec:
    if style not in STYLES:
        raise ValueError(f"unknown phantom style {style!r}; choose from {sorted(STYLES)}")
    kw = dict(STYLES[style])
    kw.update(overrides)
    return PhantomSpec(covariates=covariates, cohort=cohort, **kw)


def _bias_field(shape, order, amplitude, rng):
    if amplitude == 0:
        return np.ones(shape, dtype=np.float64)
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    z, y, x = np.meshgrid(*axes, indexing="ij", sparse=True)
    poly = np.zeros(shape)
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                if i + j + k == 0:
                    continue
                poly = poly + rng.uniform(-1, 1) * z**i * y**j * x**k
    peak = np.abs(poly).max()
    if peak > 0:
        poly /= peak
    return np.exp(amplitude * poly)


def _label_geometry(spec: PhantomSpec, rng) -> np.ndarray:
    Z, Y, X = spec.shape
    sz, sy, sx = spec.spacing
    cov = spec.covariates
    bmi_f = (cov.bmi - 18.0) / 20.0  # ~0 lean .. ~1 obese
    labels = np.zeros(spec.shape, dtype=np.uint8)

    z0, z1 = int(round(spec.body_z[0] * Z)), int(round(spec.body_z[1] * Z))
    phase = rng.uniform(0, 2 * np.pi)
    harm = rng.uniform(-0.04, 0.04, size=2)
    harm_ph = rng.uniform(0, 2 * np.pi, size=2)
    t_phase = rng.uniform(0, 2 * np.pi)
    pix = max(sy, sx)
    base_sat = spec.sat_mm
    if base_sat is None:
        base_sat = (5.0 + 12.0 * bmi_f) * (1.15 if cov.sex else 1.0)
    base_sat = max(base_sat, MIN_RING_PX * pix)
    girth = 1.0 + 0.25 * bmi_f

    yy = (np.arange(Y) - (Y - 1) / 2.0) * sy
    xx = (np.arange(X) - (X - 1) / 2.0) * sx
    dy, dx = np.meshgrid(yy, xx, indexing="ij")
    theta = np.arctan2(dy, dx)
    rho = np.hypot(dy, dx)

    r_in_slices = {}
    for z in range(z0, z1):
        u = (z - z0 + 0.5) / max(z1 - z0, 1)
        shape_mod = 0.85 + 0.12 * math.sin(math.pi * u) + 0.04 * math.cos(3 * math.pi * u + phase)
        a = spec.half_width_mm * girth * shape_mod
        b = spec.half_depth_mm * girth * shape_mod
        r_ell = a * b / np.sqrt((b * np.cos(theta)) ** 2 + (a * np.sin(theta)) ** 2)
        wobble = 1.0 + harm[0] * np.cos(2 * theta + harm_ph[0]) + harm[1] * np.cos(3 * theta + harm_ph[1])
        r_out = r_ell * wobble
        thick = base_sat * (1.0 + 0.25 * np.cos(theta - t_phase)) * (0.8 + 0.4 * math.sin(math.pi * u))
        thick = np.clip(thick, MIN_RING_PX * pix, 0.6 * r_out)
        r_in = r_out - thick
        sl = labels[z]
        sl[rho <= r_out] = SAT
        sl[rho < r_in] = LT
        r_in_slices[z] = r_in

    # VAT blobs inside the abdominal slab
    a0 = z0 + int(round(spec.abdomen[0] * (z1 - z0)))
    a1 = z0 + int(round(spec.abdomen[1] * (z1 - z0)))
    n_blobs = spec.vat_blobs
    if n_blobs is None:
        n_blobs = int(round((12 + 16 * bmi_f) * (0.8 if cov.sex else 1.0) * (1 + (cov.age - 50) / 100.0)))
    n_blobs = max(n_blobs, 0)
    zz = (np.arange(Z) * sz)[:, None, None]
    margin = VAT_MARGIN_PX * pix
    blob_mask = np.zeros(spec.shape, dtype=bool)
    for _ in range(n_blobs):
        bz = rng.uniform(a0, max(a1 - 1, a0)) * sz
        ang = rng.uniform(0, 2 * np.pi)
        zc = int(min(max(round(bz / sz), a0), max(a1 - 1, a0)))
        r_ref = r_in_slices.get(zc)
        if r_ref is None:
            continue
        reach = 0.6 * float(r_ref.min()) * math.sqrt(rng.uniform(0, 1))
        cy, cx = reach * math.sin(ang), reach * math.cos(ang)
        ry, rx = rng.uniform(7.0, 15.0, size=2) * (0.8 + 0.4 * bmi_f)
        rz = rng.uniform(30.0, 80.0)
        q = ((zz - bz) / rz) ** 2 + ((dy - cy) / ry)[None] ** 2 + ((dx - cx) / rx)[None] ** 2
        blob_mask |= q <= 1.0
    for z in range(a0, a1):
        core = rho < (r_in_slices[z] - margin)
        sl = labels[z]
        sl[blob_mask[z] & core & (sl == LT)] = VAT
    return labels


def check_ring(labels: np.ndarray) -> None:
    """Raise if any LT/VAT voxel touches background in-plane (4-neighbourhood)."""
    inner = (labels == LT) | (labels == VAT)
    bg = labels == BG
    touch = np.zeros_like(inner)
    touch[:, 1:, :] |= bg[:, :-1, :]
    touch[:, :-1, :] |= bg[:, 1:, :]
    touch[:, :, 1:] |= bg[:, :, :-1]
    touch[:, :, :-1] |= bg[:, :, 1:]
    edge = np.zeros_like(inner)
    edge[:, [0, -1], :] = True
    edge[:, :, [0, -1]] = True
    bad = inner & (touch | edge)
    if bad.any():
        z = int(np.argwhere(bad)[0, 0])
        raise ValueError(f"SAT ring does not enclose the interior in slice {z}")


def generate_phantom(spec: PhantomSpec, seed: int):
    """``(Volume, LabelMask, covariates)``; bit-identical for equal inputs."""
    geo_rng = rng_for(seed, "geometry")
    labels = _label_geometry(spec, geo_rng)
    check_ring(labels)
    bias = _bias_field(spec.shape, spec.bias_order, spec.bias_amplitude, rng_for(seed, "bias"))
    noise_rng = rng_for(seed, "noise")
    data = np.empty((spec.n_channels,) + spec.shape, dtype=np.float32)
    lut = np.array([spec.intensities[c] for c in (BG, LT, VAT, SAT)], dtype=np.float64)  # [4, C]
    for c in range(spec.n_channels):
        ch = lut[labels, c] * bias
        if spec.noise_sigma > 0:
            ch = ch + noise_rng.normal(0.0, spec.noise_sigma, size=spec.shape)
        data[c] = ch
    vol = Volume(data, spec.spacing, (0.0, 0.0, 0.0), spec.cohort, spec.channels)
    mask = LabelMask(labels, spec.spacing, (0.0, 0.0, 0.0), spec.cohort)
    return vol, mask, asdict(spec.covariates)


# ---------------------------------------------------------------- cohorts ---

@dataclass
class CohortConfig:
    style: str = "fse"
    n_subjects: int = 50
    fractions: tuple = (0.7, 0.1, 0.2)  # train, val, test
    n_folds: int = 4
    seed: int = 0
    name: str = "A"
    overrides: dict = field(default_factory=dict)  # PhantomSpec field overrides

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.style not in STYLES:
            raise ValueError(f"unknown cohort style {self.style!r}")
        if len(self.fractions) != 3 or min(self.fractions) <= 0 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError("split fractions must be three positive values summing to 1")
        if self.n_subjects < 10:
            raise ValueError(f"need at least 10 subjects to stratify, got {self.n_subjects}")
        if self.n_folds < 1:
            raise ValueError("n_folds must be >= 1")
        if min(split_counts(self.n_subjects, self.fractions)) < 1:
            raise ValueError("split fractions leave an empty split")


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    """Largest-remainder rounding, so the counts always sum to ``n``."""
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    rem = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in rem[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def _sample_covariates(rng) -> Covariates:
    sex = int(rng.integers(0, 2))
    age = int(rng.integers(20, 80))
    bmi = float(np.clip(rng.normal(27.0, 4.5), 18.0, 42.0))
    return Covariates(sex, age, round(bmi, 2))


def _bmi_terciles(bmis):
    cuts = np.quantile(np.asarray(bmis), [1 / 3, 2 / 3])
    return [int(np.searchsorted(cuts, b, side="right")) for b in bmis]


def stratified_split(strata, counts, rng) -> list[int]:
    """Assign each subject a split index (0 train, 1 val, 2 test).

    Subjects are ordered stratum by stratum (shuffled within a stratum) and
    dealt out to whichever split is furthest behind its proportional
    share, so every stratum is spread close to the split fractions.
    """
    n = len(strata)
    order = rng.permutation(n)
    order = sorted(order, key=lambda i: strata[i])  # stable: shuffled within strata
    target = np.asarray(counts, dtype=np.float64) / n
    got = np.zeros(3)
    out = [0] * n
    for k, i in enumerate(order, start=1):
        deficit = target * k - got
        deficit[got >= np.asarray(counts)] = -np.inf
        s = int(np.argmax(deficit))
        out[i] = s
        got[s] += 1
    return out


class Cohort:
    """Subjects with covariates and per-fold train/val/test assignments.

    Phantoms are generated on demand from the per-subject seed."""

    def __init__(self, config: CohortConfig):
        self.config = config
        rng = rng_for(config.seed, config.name, "covariates")
        self.subjects = []
        for i in range(config.n_subjects):
            cov = _sample_covariates(rng)
            self.subjects.append(dict(id=f"{config.name}{i:03d}", index=i,
                                      seed=derive_seed(config.seed, config.name, "subject", i), **asdict(cov)))
        terc = _bmi_terciles([s["bmi"] for s in self.subjects])
        strata = [(s["sex"], t) for s, t in zip(self.subjects, terc)]
        counts = split_counts(config.n_subjects, config.fractions)
        self.folds = []
        for k in range(config.n_folds):
            fold_rng = rng_for(config.seed, config.name, "fold", k)
            assign = stratified_split(strata, counts, fold_rng)
            self.folds.append({name: [i for i, a in enumerate(assign) if a == s]
                               for s, name in enumerate(("train", "val", "test"))})

    @property
    def name(self):
        return self.config.name

    def split(self, fold: int, which: str) -> list[int]:
        return list(self.folds[fold][which])

    def spec(self, index: int) -> PhantomSpec:
        s = self.subjects[index]
        cov = Covariates(s["sex"], s["age"], s["bmi"])
        return spec_for(self.config.style, cov, cohort=self.config.name, **self.config.overrides)

    def phantom(self, index: int):
        return generate_phantom(self.spec(index), self.subjects[index]["seed"])

    def manifest(self) -> dict:
        cfg = asdict(self.config)
        cfg["fractions"] = list(cfg["fractions"])
        return dict(
            format_version=1,
            config=cfg,
            subjects=self.subjects,
            folds=[{k: [self.subjects[i]["id"] for i in v] for k, v in f.items()} for f in self.folds],
        )


def generate_cohort(config: CohortConfig) -> Cohort:
    return Cohort(config)
