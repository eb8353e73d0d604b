"""Volumes, min-max normalization, sliding-window patches and reassembly."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

PATCH = 32
CHANNEL_KINDS = ("T1-FSE", "Dixon-fat+water")
CLASS_NAMES = ("BG", "LT", "VAT", "SAT")


@dataclass
class Volume:
    """Image [C, Z, Y, X]; spacing and origin in mm, ordered (z, y, x)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    cohort: str = ""
    channels: str = "T1-FSE"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be [C, Z, Y, X], got shape {self.data.shape}")
        if self.data.shape[0] not in (1, 2):
            raise ValueError(f"volume must have 1 or 2 channels, got {self.data.shape[0]}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.channels not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel semantics {self.channels!r}")

    @property
    def shape(self):
        return self.data.shape[1:]

    @property
    def n_channels(self):
        return self.data.shape[0]


@dataclass
class LabelMask:
    """Per-voxel classes {0: BG, 1: LT, 2: VAT, 3: SAT} as uint8 [Z, Y, X]."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    cohort: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"label mask must be [Z, Y, X], got shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 3):
            raise ValueError("labels must lie in 0..3")
        self.labels = self.labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)


@dataclass
class PatchBatch:
    patches: np.ndarray  # [N, C, 32, 32, 32]
    positions: np.ndarray  # [N, 3] normalized patch centers
    starts: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), int))  # [N, 3] in padded grid
    padded_shape: tuple = ()
    volume_shape: tuple = ()

    def __len__(self):
        return len(self.patches)

    def subset(self, idx) -> "PatchBatch":
        idx = np.asarray(idx)
        starts = self.starts[idx] if len(self.starts) == len(self.patches) else self.starts
        return replace(self, patches=self.patches[idx], positions=self.positions[idx], starts=starts)


def normalize_volume(v: Volume) -> Volume:
    """Per-channel min-max scaling to [0, 1]; constant channels become 0."""
    if not np.isfinite(v.data).all():
        raise ValueError("cannot normalize a volume containing NaN or Inf")
    out = np.zeros_like(v.data)
    for c, ch in enumerate(v.data):
        lo, hi = float(ch.min()), float(ch.max())
        if hi > lo:
            out[c] = (ch.astype(np.float64) - lo) / (hi - lo)
    return replace(v, data=out)


def grid_starts(extent: int, stride: int, patch: int = PATCH) -> np.ndarray:
    """Patch start indices along one axis and the padded extent."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if stride > patch:
        raise ValueError(f"stride {stride} exceeds the patch edge {patch}; voxels would be skipped")
    n = max(1, -(-max(extent - patch, 0) // stride) + 1)
    return np.arange(n) * stride


def patch_grid(shape, stride: int = 16, patch: int = PATCH):
    """All patch starts [N, 3] (z-major order) and the zero-padded shape."""
    axes = [grid_starts(n, stride, patch) for n in shape]
    padded = tuple(int(a[-1]) + patch for a in axes)
    starts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return starts, padded


def pad_to(arr: np.ndarray, padded_shape) -> np.ndarray:
    """Zero-pad the trailing three axes at the high end."""
    extra = [(0, 0)] * (arr.ndim - 3) + [(0, p - n) for n, p in zip(arr.shape[-3:], padded_shape)]
    return np.pad(arr, extra)


def positions_for(starts, volume_shape, patch: int = PATCH) -> np.ndarray:
    centers = np.asarray(starts, dtype=np.float64) + patch / 2.0
    return np.clip(centers / np.asarray(volume_shape, dtype=np.float64), 0.0, 1.0)


def crop(arr: np.ndarray, starts, patch: int = PATCH) -> np.ndarray:
    """Stack of [..., patch, patch, patch] blocks at ``starts`` (batch axis first)."""
    out = np.empty((len(starts),) + arr.shape[:-3] + (patch,) * 3, dtype=arr.dtype)
    for i, (z, y, x) in enumerate(np.asarray(starts)):
        out[i] = arr[..., z:z + patch, y:y + patch, x:x + patch]
    return out


def extract_patches(v: Volume, stride: int = 16, select=None, patch: int = PATCH) -> PatchBatch:
    """Overlapping patches on a regular grid. ``select`` picks a subset of
    grid indices (in grid order) without materializing the rest."""
    starts, padded = patch_grid(v.shape, stride, patch)
    if select is not None:
        starts = starts[np.asarray(select)]
    data = pad_to(v.data, padded)
    return PatchBatch(crop(data, starts, patch), positions_for(starts, v.shape, patch), starts,
                      padded, tuple(v.shape))


def extract_label_patches(labels: np.ndarray, batch: PatchBatch, patch: int = PATCH) -> np.ndarray:
    """Label blocks [N, 32, 32, 32] matching ``batch``; padding is BG."""
    return crop(pad_to(np.asarray(labels), batch.padded_shape), batch.starts, patch)


class Accumulator:
    """Running per-voxel sum and count of patch predictions."""

    def __init__(self, n_classes, padded_shape):
        self.sum = np.zeros((n_classes,) + tuple(padded_shape), dtype=np.float64)
        self.count = np.zeros(tuple(padded_shape), dtype=np.int32)

    def add(self, probs, starts, patch: int = PATCH):
        for p, (z, y, x) in zip(probs, np.asarray(starts)):
            self.sum[:, z:z + patch, y:y + patch, x:x + patch] += p
            self.count[z:z + patch, y:y + patch, x:x + patch] += 1

    def result(self, volume_shape):
        Z, Y, X = volume_shape
        s = self.sum[:, :Z, :Y, :X]
        c = self.count[:Z, :Y, :X]
        if (c == 0).any():
            raise ValueError("some voxels are not covered by any patch")
        mean = (s / c).astype(np.float32)
        return mean, np.argmax(mean, axis=0).astype(np.uint8)


def reassemble(probs, batch: PatchBatch, target_shape=None):
    """Mean of overlapping patch probabilities; returns ``(probs [K, Z, Y, X],
    labels [Z, Y, X])`` with argmax ties going to the lowest class index."""
    probs = np.asarray(probs)
    target_shape = tuple(target_shape or batch.volume_shape)
    if probs.ndim != 5 or len(probs) != len(batch):
        raise ValueError(f"need one [K, 32, 32, 32] block per patch, got {probs.shape} for {len(batch)} patches")
    if probs.shape[2:] != batch.patches.shape[2:]:
        raise ValueError("probability blocks and patches differ in size")
    if any(t > p for t, p in zip(target_shape, batch.padded_shape)):
        raise ValueError(f"target shape {target_shape} exceeds the padded grid {batch.padded_shape}")
    acc = Accumulator(probs.shape[1], batch.padded_shape)
    acc.add(probs, batch.starts, probs.shape[-1])
    return acc.result(target_shape)
