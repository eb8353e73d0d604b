"""Head-feet tissue profiles, grouped summaries, and per-case reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patching import LabelMask

TISSUES = ((1, "LT"), (2, "VAT"), (3, "SAT"))
AGE_BINS = tuple(range(20, 90, 10))  # decade lower edges
BMI_EDGES = (25.0, 30.0)
BMI_LABELS = ("<25", "25-30", ">=30")


@dataclass
class ATProfile:
    z_mm: np.ndarray  # [Z] slice centers
    counts: np.ndarray  # [Z, 3] voxels of LT, VAT, SAT
    liters: np.ndarray  # [Z, 3]
    percent: np.ndarray  # [Z, 3] share of non-background voxels in the slice
    voxel_mm3: float

    def totals(self) -> dict:
        return {name: float(self.liters[:, j].sum()) for j, (_, name) in enumerate(TISSUES)}


def compute_profile(mask, spacing=None, origin_z: float = 0.0) -> ATProfile:
    """Per-slice volumes (liters) and percentages of LT, VAT and SAT."""
    labels = np.asarray(getattr(mask, "labels", mask))
    if spacing is None:
        spacing = mask.spacing
    sz, sy, sx = (float(s) for s in spacing)
    if min(sz, sy, sx) <= 0:
        raise ValueError("spacing must be positive")
    if labels.ndim != 3:
        raise ValueError("mask must be [Z, Y, X]")
    if labels.size and labels.max() > 3:
        raise ValueError("mask classes must lie in 0..3")
    Z = labels.shape[0]
    flat = labels.reshape(Z, -1)
    counts = np.stack([(flat == c).sum(axis=1) for c, _ in TISSUES], axis=1).astype(np.int64)
    voxel = sz * sy * sx
    liters = counts * voxel * 1e-6
    body = counts.sum(axis=1, keepdims=True)
    percent = np.where(body > 0, 100.0 * counts / np.maximum(body, 1), 0.0)
    z_mm = origin_z + np.arange(Z) * sz
    return ATProfile(z_mm, counts, liters, percent, voxel)


def age_bin(age) -> str:
    lo = int(age) // 10 * 10
    return f"{lo}-{lo + 9}"


def bmi_bin(bmi) -> str:
    return BMI_LABELS[int(np.searchsorted(BMI_EDGES, float(bmi), side="right"))]


def _key(cov: dict, by) -> tuple:
    out = []
    for k in by:
        if k == "sex":
            out.append("female" if int(cov["sex"]) else "male")
        elif k == "age":
            out.append(age_bin(cov["age"]))
        elif k == "bmi":
            out.append(bmi_bin(cov["bmi"]))
        else:
            raise ValueError(f"unknown grouping key {k!r}")
    return tuple(out)


def _all_keys(by):
    axes = []
    for k in by:
        if k == "sex":
            axes.append(["male", "female"])
        elif k == "age":
            axes.append([f"{a}-{a + 9}" for a in AGE_BINS])
        else:
            axes.append(list(BMI_LABELS))
    keys = [()]
    for ax in axes:
        keys = [k + (v,) for k in keys for v in ax]
    return keys


def resample_profile(p: ATProfile, n_points: int = 100):
    """Liters and percent on a normalized head-feet axis spanning the body
    (first to last non-empty slice), ``n_points`` samples."""
    body = np.flatnonzero(p.counts.sum(axis=1) > 0)
    u = np.linspace(0.0, 1.0, n_points)
    if body.size == 0:
        z = np.zeros((n_points, 3))
        return z, z.copy()
    lo, hi = body[0], body[-1]
    src = np.linspace(0.0, 1.0, hi - lo + 1) if hi > lo else np.zeros(1)
    out = []
    for arr in (p.liters, p.percent):
        seg = arr[lo:hi + 1]
        if len(src) == 1:
            out.append(np.repeat(seg, n_points, axis=0))
        else:
            out.append(np.stack([np.interp(u, src, seg[:, j]) for j in range(3)], axis=1))
    return out[0], out[1]


@dataclass
class GroupSummary:
    by: tuple
    n_points: int
    groups: dict  # key -> {"n", "members", "liters_mean", "liters_std", "percent_mean", "percent_std"}
    warnings: list = field(default_factory=list)


def group_profiles(profiles, covariates, by=("sex", "age"), n_points: int = 100, ids=None) -> GroupSummary:
    """Pointwise mean and sample std (n - 1; 0 for a single member) per group."""
    profiles = list(profiles)
    covariates = list(covariates)
    if len(profiles) != len(covariates):
        raise ValueError("need one covariate record per profile")
    ids = list(ids) if ids is not None else list(range(len(profiles)))
    members: dict = {}
    for pid, p, cov in zip(ids, profiles, covariates):
        members.setdefault(_key(cov, by), []).append((pid, resample_profile(p, n_points)))
    groups, warnings = {}, []
    for key in _all_keys(by):
        if key not in members:
            warnings.append(dict(group=list(key), reason="empty group dropped"))
            continue
        entries = members[key]
        lit = np.stack([e[1][0] for e in entries])
        pct = np.stack([e[1][1] for e in entries])
        n = len(entries)

        def std(a):
            return a.std(axis=0, ddof=1) if n > 1 else np.zeros(a.shape[1:])

        groups[key] = dict(n=n, members=[e[0] for e in entries],
                           liters_mean=lit.mean(axis=0), liters_std=std(lit),
                           percent_mean=pct.mean(axis=0), percent_std=std(pct))
    return GroupSummary(tuple(by), n_points, groups, warnings)


def write_group_csv(summary: GroupSummary, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "n", "u", "class", "liters_mean", "liters_std", "percent_mean", "percent_std"])
        for key, g in summary.groups.items():
            label = "/".join(key) or "all"
            for i in range(summary.n_points):
                u = i / (summary.n_points - 1) if summary.n_points > 1 else 0.0
                for j, (_, name) in enumerate(TISSUES):
                    w.writerow([label, g["n"], f"{u:.6f}", name, repr(float(g["liters_mean"][i, j])),
                                repr(float(g["liters_std"][i, j])), repr(float(g["percent_mean"][i, j])),
                                repr(float(g["percent_std"][i, j]))])
    return path


def write_profile_csv(p: ATProfile, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["z_mm", "class", "liters", "percent"])
        for i, z in enumerate(p.z_mm):
            for j, (_, name) in enumerate(TISSUES):
                w.writerow([repr(float(z)), name, repr(float(p.liters[i, j])), repr(float(p.percent[i, j]))])
    return path


def read_profile_csv(path) -> dict:
    """``{class: (z_mm array, liters array, percent array)}``."""
    rows: dict = {}
    with Path(path).open(encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["class"], []).append((float(r["z_mm"]), float(r["liters"]), float(r["percent"])))
    return {k: tuple(np.array(c) for c in zip(*v)) for k, v in rows.items()}


def emit_report(case_id: str, mask: LabelMask, profile: ATProfile, out_dir, metrics=None) -> dict:
    """Write mask container, profile CSV and a JSON summary; return paths."""
    from .storage import write_mask

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write report to {out}: {e}") from e
    mask_stem = write_mask(out / f"{case_id}_mask", mask)
    csv_path = write_profile_csv(profile, out / f"{case_id}_profile.csv")
    summary = dict(case_id=case_id, slices=int(len(profile.z_mm)), voxel_mm3=profile.voxel_mm3,
                   totals_liters=profile.totals())
    if metrics is not None:
        summary["metrics"] = dict(accuracy=metrics.accuracy, per_class=metrics.per_class)
    summary_path = out / f"{case_id}_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return dict(mask=str(mask_stem) + ".json", profile=str(csv_path), summary=str(summary_path))
