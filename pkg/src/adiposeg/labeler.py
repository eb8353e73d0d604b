"""Classical two-stage labeler: fuzzy c-means, then a per-slice snake.

FCM separates background, lean and adipose tissue by intensity. A closed
contour started just inside the body outline then shrinks until it rests
on the inner edge of the subcutaneous fat ring; adipose tissue outside the
contour is SAT and inside it is VAT.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon
from skimage.draw import polygon2mask

from .patching import LabelMask, Volume, normalize_volume

BG, LT, VAT, SAT = 0, 1, 2, 3
_EIGHT = np.ones((3, 3), dtype=bool)


# ------------------------------------------------------------ fuzzy c-means

@dataclass
class FcmState:
    centers: np.ndarray  # [k, C]
    memberships: np.ndarray  # [N, k]
    m: float
    objective: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _dist2(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _memberships(x, centers, m):
    d2 = _dist2(x, centers)
    zero = d2 <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = d2 ** (-1.0 / (m - 1.0))
        u = inv / inv.sum(axis=1, keepdims=True)
    hit = zero.any(axis=1)
    if hit.any():
        # voxel sitting on a center: hard membership to (the first) such center
        first = np.argmax(zero[hit], axis=1)
        u[hit] = 0.0
        u[np.flatnonzero(hit), first] = 1.0
    return u, d2


def _centers(x, u, m):
    w = u**m
    return (w.T @ x) / w.sum(axis=0)[:, None]


def fcm_cluster(intensities, k: int = 3, m: float = 2.0, tol: float = 1e-5,
                max_iter: int = 200) -> FcmState:
    """Fuzzy c-means on ``intensities`` ([N] or [N, C]).

    Clusters come back sorted by their channel-0 center. Centers start at
    evenly spaced channel-0 quantiles, so the result is deterministic.
    """
    x = np.asarray(intensities, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1:
        raise ValueError("k must be >= 1")
    if m <= 1:
        raise ValueError("fuzzifier m must be > 1")
    if not np.isfinite(x).all():
        raise ValueError("intensities must be finite")
    if len(x) < k:
        raise ValueError(f"need at least k={k} samples")
    if k == 1:
        return FcmState(x.mean(axis=0, keepdims=True), np.ones((len(x), 1)), m, [float(((x - x.mean(0)) ** 2).sum())], 0, True)
    order = np.argsort(x[:, 0], kind="stable")
    picks = order[((np.arange(k) + 0.5) / k * len(x)).astype(int)]
    centers = x[picks].copy()
    objective = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        u, _ = _memberships(x, centers, m)
        new = _centers(x, u, m)
        shift = float(np.abs(new - centers).max())
        centers = new
        objective.append(float(((u**m) * _dist2(x, centers)).sum()))
        if shift < tol:
            converged = True
            break
    u, _ = _memberships(x, centers, m)
    perm = np.argsort(centers[:, 0], kind="stable")
    return FcmState(centers[perm], u[:, perm], m, objective, it, converged)


def partial_volume_correct(state: FcmState, shape, threshold: float = 0.6) -> np.ndarray:
    """Hard labels: argmax membership, except that voxels whose top
    membership is below ``threshold`` take the majority class of their
    3x3x3 neighbourhood (ties go to the voxel's own stronger membership)."""
    u = state.memberships
    k = u.shape[1]
    hard = np.argmax(u, axis=1).reshape(shape).astype(np.uint8)
    ambiguous = (u.max(axis=1) < threshold).reshape(shape)
    if not ambiguous.any():
        return hard
    kernel = np.ones((3,) * len(shape))
    votes = np.stack([ndimage.convolve((hard == c).astype(np.float64), kernel, mode="constant")
                      - (hard == c) for c in range(k)], axis=-1)
    score = votes[ambiguous] + u.reshape(tuple(shape) + (k,))[ambiguous]
    out = hard.copy()
    out[ambiguous] = np.argmax(score, axis=1)
    return out


# -------------------------------------------------------------------- snake

@dataclass(frozen=True)
class SnakeWeights:
    alpha: float = 0.2  # membrane (first-difference) term
    beta: float = 0.2  # curvature (second-difference) term
    gamma: float = 1.0  # edge attraction
    n_points: int = 64
    max_iter: int = 400
    capture: float | None = None  # edge falloff distance in px; None = half the slice size
    snap: float = 0.8  # AT components this much on one side go wholly to it

    def __post_init__(self):
        if self.n_points < 8 or self.n_points % 4:
            raise ValueError("n_points must be a multiple of 4 and at least 8")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("snake weights must be non-negative")


_MOVES = np.array([(0, 0), (-1, 0), (0, 1), (1, 0), (0, -1), (-1, -1), (-1, 1), (1, 1), (1, -1)], dtype=np.float64)


def _ray_dirs(n):
    q = n // 4
    ang = 2 * np.pi * np.arange(q) / n
    first = np.stack([np.sin(ang), np.cos(ang)], axis=1)  # (dy, dx)
    dirs = [first]
    for _ in range(3):
        dy, dx = dirs[-1][:, 0], dirs[-1][:, 1]
        dirs.append(np.stack([dx, -dy], axis=1))  # exact 90 degree turn
    return np.concatenate(dirs)


def _sample(field_, pts):
    return ndimage.map_coordinates(field_, pts.T, order=1, mode="nearest")


def _init_contour(body, center, n):
    dirs = _ray_dirs(n)
    r_max = float(np.hypot(*body.shape))
    steps = np.arange(0.0, r_max, 0.25)
    pts = center[None, None, :] + steps[None, :, None] * dirs[:, None, :]  # [n, S, 2]
    inside = _sample(body.astype(np.float64), pts.reshape(-1, 2)).reshape(n, -1) >= 0.5
    inside &= (pts[..., 0] >= 0) & (pts[..., 1] >= 0) & (pts[..., 0] <= body.shape[0] - 1) & (pts[..., 1] <= body.shape[1] - 1)
    last = np.array([np.flatnonzero(row).max() if row.any() else 0 for row in inside])
    radius = np.maximum(steps[last] - 1.0, 0.0)
    return center[None, :] + radius[:, None] * dirs


def _norm(e):
    lo = e.min(axis=1, keepdims=True)
    span = e.max(axis=1, keepdims=True) - lo
    return np.where(span > 1e-12, (e - lo) / np.where(span > 1e-12, span, 1.0), 0.0)


def _edge_strength(at, body, capture):
    """1 on lean-side pixels bordering adipose tissue, falling off linearly
    with distance so the contour is drawn across the whole fat ring."""
    near_at = ndimage.binary_dilation(at, _EIGHT)
    edge = near_at & ~at & body
    if not edge.any():
        return np.zeros(at.shape)
    dist = ndimage.distance_transform_edt(~edge)
    return np.clip(1.0 - dist / capture, 0.0, 1.0)


def _valid(v):
    return Polygon(v).is_valid


def _morph_split(at, body):
    """Fallback: AT components touching the body outline are SAT."""
    outline = body & ~ndimage.binary_erosion(body, _EIGHT, border_value=0)
    lab, n = ndimage.label(at, _EIGHT)
    touching = np.unique(lab[outline & at])
    sat = np.isin(lab, touching[touching > 0])
    return sat, at & ~sat


def _snap(at, inside, frac):
    lab, n = ndimage.label(at, _EIGHT)
    if n == 0:
        return inside
    size = ndimage.sum_labels(np.ones_like(at), lab, index=np.arange(1, n + 1))
    ins = ndimage.sum_labels(inside & at, lab, index=np.arange(1, n + 1))
    share = ins / np.maximum(size, 1)
    out = inside.copy()
    to_in = np.concatenate([[False], share >= frac])
    to_out = np.concatenate([[False], share <= 1.0 - frac])
    out[to_in[lab]] = True
    out[to_out[lab]] = False
    return out


def _greedy_moves(v, strength, w):
    """Best 3x3 move per vertex with its neighbours held fixed."""
    prev, nxt = np.roll(v, 1, axis=0), np.roll(v, -1, axis=0)
    cand = v[:, None, :] + _MOVES[None, :, :]  # [n, 9, 2]
    memb = ((cand - prev[:, None]) ** 2).sum(-1) + ((nxt[:, None] - cand) ** 2).sum(-1)
    curv = ((prev[:, None] - 2 * cand + nxt[:, None]) ** 2).sum(-1)
    edge = _sample(strength, cand.reshape(-1, 2)).reshape(cand.shape[:2])
    energy = w.alpha * _norm(memb) + w.beta * _norm(curv) + w.gamma * _norm(-edge)
    best = np.argmin(energy, axis=1)
    return best, cand[np.arange(len(v)), best]


def snake_split(at, body, weights: SnakeWeights = SnakeWeights()):
    """Split one slice's adipose mask into (SAT, VAT, info).

    ``at`` and ``body`` are 2-D boolean masks. ``info`` records iterations,
    convergence, and whether the morphological fallback was used.
    """
    at = np.asarray(at, dtype=bool)
    body = np.asarray(body, dtype=bool) | at
    info = dict(iterations=0, converged=True, fallback=False, rejected=False)
    if not at.any():
        return np.zeros_like(at), np.zeros_like(at), info
    body = ndimage.binary_fill_holes(body)
    center = np.argwhere(body).mean(axis=0)
    capture = weights.capture or 0.5 * max(at.shape)
    strength = _edge_strength(at, body, capture)
    v = _init_contour(body, center, weights.n_points)
    seen = {v.tobytes()}
    converged = False
    parity = np.arange(len(v)) % 2
    for it in range(1, weights.max_iter + 1):
        info["iterations"] = it
        moved = False
        # red-black half sweeps: neighbours never move in the same step
        for half in (0, 1):
            best, new = _greedy_moves(v, strength, weights)
            step = (best != 0) & (parity == half)
            if not step.any():
                continue
            trial = np.where(step[:, None], new, v)
            if not _valid(trial):
                info["rejected"] = True
                trial = v.copy()
                for i in np.flatnonzero(step):
                    keep = trial[i].copy()
                    trial[i] = new[i]
                    if not _valid(trial):
                        trial[i] = keep
            if (trial != v).any():
                moved = True
                v = trial
        if not moved:
            converged = True
            break
        key = v.tobytes()
        if key in seen:  # settled into a cycle
            converged = True
            break
        seen.add(key)
    info["converged"] = converged
    if not converged or not _valid(v):
        info["fallback"] = True
        sat, vat = _morph_split(at, body)
        return sat, vat, info
    inside = polygon2mask(at.shape, v)
    inside = _snap(at, inside, weights.snap)
    vat = at & inside
    sat = at & ~inside
    return sat, vat, info


# ------------------------------------------------------------ whole volume

@dataclass(frozen=True)
class LabelerConfig:
    k: int = 3
    m: float = 2.0
    tol: float = 1e-5
    max_iter: int = 200
    pv_threshold: float = 0.6
    snake: SnakeWeights = SnakeWeights()


def label_volume(v: Volume, config: LabelerConfig = LabelerConfig()):
    """Normalize, cluster, correct, and split; returns ``(LabelMask, log)``.

    The log holds the FCM trace and one entry per slice containing adipose
    tissue (iterations, convergence, fallback)."""
    if config.k != 3:
        raise ValueError("label_volume needs k=3 (background, lean, adipose)")
    nv = normalize_volume(v)
    C = nv.data.shape[0]
    x = nv.data.reshape(C, -1).T
    log = dict(fcm_iterations=0, fcm_objective=[], slices=[])
    labels = np.zeros(nv.shape, dtype=np.uint8)
    if not (x.max(axis=0) > x.min(axis=0)).any():
        return LabelMask(labels, v.spacing, v.origin, v.cohort), log
    state = fcm_cluster(x, 3, config.m, config.tol, config.max_iter)
    log["fcm_iterations"] = state.iterations
    log["fcm_objective"] = state.objective
    log["fcm_centers"] = state.centers.tolist()
    hard = partial_volume_correct(state, nv.shape, config.pv_threshold)
    labels[hard == 1] = LT
    at3 = hard == 2
    for z in range(nv.shape[0]):
        at = at3[z]
        if not at.any():
            continue
        sat, vat, info = snake_split(at, hard[z] > 0, config.snake)
        labels[z][sat] = SAT
        labels[z][vat] = VAT
        log["slices"].append(dict(z=z, **info))
    return LabelMask(labels, v.spacing, v.origin, v.cohort), log


def labeler_config_dict(cfg: LabelerConfig) -> dict:
    return asdict(cfg)
