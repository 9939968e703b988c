"""Occupancy metrics: voxel IoU, per-class mIoU and RayIoU via voxel DDA ray casting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bevfuse import OccGridSpec
from .errors import ContractError


@dataclass
class OccupancyGrid:
    """Semantic labels (X_o, Y_o, Z_o); linear index (x * Y_o + y) * Z_o + z."""

    spec: OccGridSpec
    labels: np.ndarray
    mask: np.ndarray | None = None
    num_classes: int = 6
    free_class: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.labels.shape != self.spec.dims:
            raise ContractError(f"labels shape {self.labels.shape} does not match grid dims {self.spec.dims}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.labels.shape:
                raise ContractError("visibility mask shape differs from labels")

    @property
    def occupied(self) -> np.ndarray:
        return self.labels != self.free_class


def _check_pair(pred: OccupancyGrid, gt: OccupancyGrid):
    if pred.labels.shape != gt.labels.shape:
        raise ContractError(f"grid dims differ: {pred.labels.shape} vs {gt.labels.shape}")
    if not (np.allclose(pred.spec.min_bound, gt.spec.min_bound)
            and np.allclose(pred.spec.voxel_size, gt.spec.voxel_size)):
        raise ContractError("grid specs differ")


def _eval_mask(gt: OccupancyGrid, use_mask: bool) -> np.ndarray:
    if not use_mask:
        return np.ones(gt.labels.shape, dtype=bool)
    if gt.mask is None:
        raise ContractError("use_mask requested but ground truth carries no visibility mask")
    return gt.mask


def _iou(inter: int, union: int) -> float:
    return 1.0 if union == 0 else inter / union


def voxel_iou(pred: OccupancyGrid, gt: OccupancyGrid, use_mask: bool = False) -> float:
    """Class-agnostic IoU of occupied voxels; empty union counts as 1."""
    _check_pair(pred, gt)
    m = _eval_mask(gt, use_mask)
    p, g = pred.occupied & m, gt.occupied & m
    return _iou(int((p & g).sum()), int((p | g).sum()))


@dataclass
class MIoUResult:
    per_class: list  # IoU per class id; None for the free class and classes absent from both
    mean: float


def miou(pred: OccupancyGrid, gt: OccupancyGrid, use_mask: bool = False, num_classes: int | None = None) -> MIoUResult:
    _check_pair(pred, gt)
    k = num_classes or gt.num_classes
    m = _eval_mask(gt, use_mask)
    pl, gl = pred.labels[m], gt.labels[m]
    per = []
    for c in range(k):
        if c == gt.free_class:
            per.append(None)
            continue
        pc, gc = pl == c, gl == c
        union = int((pc | gc).sum())
        per.append(None if union == 0 else int((pc & gc).sum()) / union)
    vals = [v for v in per if v is not None]
    return MIoUResult(per, float(np.mean(vals)) if vals else 1.0)


# --- ray casting -------------------------------------------------------------

@dataclass(frozen=True)
class RayHit:
    index: tuple
    depth: float
    cls: int


@dataclass(frozen=True)
class RaySet:
    origins: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if o.shape != d.shape:
            raise ContractError("need one origin per ray direction")
        if d.size and np.abs(np.linalg.norm(d, axis=1) - 1.0).max() > 1e-9:
            raise ContractError("ray directions must be unit length")
        object.__setattr__(self, "origins", o)
        object.__setattr__(self, "directions", d)

    def __len__(self):
        return len(self.origins)


def dda_first_hit(occupied: np.ndarray, grid_min, voxel_size, origins, directions, max_t=None):
    """Vectorised Amanatides-Woo traversal over an [x, y, z] boolean grid.

    Returns ``(hit, index, depth)``: per-ray flag, (N, 3) voxel index and the
    distance to the entry face of the first occupied voxel (0 when the origin
    lies inside it). With ``max_t``, voxels entered at or beyond it are ignored.
    """
    occ = np.asarray(occupied, dtype=bool)
    n = np.array(occ.shape, dtype=np.int64)
    lo = np.asarray(grid_min, dtype=np.float64)
    vs = np.asarray(voxel_size, dtype=np.float64)
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    nr = len(o)
    limit = np.full(nr, np.inf) if max_t is None else np.broadcast_to(np.asarray(max_t, float), (nr,)).copy()
    hi = lo + n * vs

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(d != 0, 1.0 / d, np.inf)
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.where(d != 0, np.minimum(t1, t2), np.where((o >= lo) & (o < hi), -np.inf, np.inf))
    tmax = np.where(d != 0, np.maximum(t1, t2), np.where((o >= lo) & (o < hi), np.inf, -np.inf))
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = tmax.min(axis=1)
    active = t_enter < t_exit

    t_enter = np.where(active, t_enter, 0.0)  # missed rays never step
    p = o + t_enter[:, None] * d
    idx = np.clip(np.floor((p - lo) / vs).astype(np.int64), 0, n - 1)
    step = np.where(d > 0, 1, np.where(d < 0, -1, 0)).astype(np.int64)
    boundary = lo + (idx + (step > 0)) * vs
    with np.errstate(divide="ignore", invalid="ignore"):
        t_next = np.where(step != 0, (boundary - o) * inv, np.inf)
        t_delta = np.where(step != 0, vs * np.abs(inv), np.inf)
    t_cur = t_enter.copy()

    hit = np.zeros(nr, dtype=bool)
    depth = np.full(nr, np.nan)
    hit_idx = np.full((nr, 3), -1, dtype=np.int64)
    rows = np.arange(nr)
    while np.any(active):
        a = rows[active]
        active[a] = t_cur[a] < limit[a]
        a = rows[active]
        if len(a) == 0:
            break
        ia = idx[a]
        occ_here = occ[ia[:, 0], ia[:, 1], ia[:, 2]]
        h = a[occ_here]
        hit[h] = True
        depth[h] = t_cur[h]
        hit_idx[h] = idx[h]
        active[h] = False
        a = a[~occ_here]
        if len(a) == 0:
            break
        ax = np.argmin(t_next[a], axis=1)
        t_cur[a] = t_next[a, ax]
        idx[a, ax] += step[a, ax]
        t_next[a, ax] += t_delta[a, ax]
        inside = (idx[a, ax] >= 0) & (idx[a, ax] < n[ax])
        active[a[~inside]] = False
    return hit, hit_idx, depth


def raycast_batch(grid: OccupancyGrid, origins, directions, max_t=None):
    """First non-free voxel per ray; returns (hit, index, depth, cls) arrays."""
    hit, idx, depth = dda_first_hit(grid.occupied, grid.spec.min_bound, grid.spec.voxel_size,
                                    origins, directions, max_t)
    cls = np.full(len(hit), -1, dtype=np.int64)
    cls[hit] = grid.labels[idx[hit, 0], idx[hit, 1], idx[hit, 2]]
    return hit, idx, depth, cls


def raycast_first_hit(grid: OccupancyGrid, origin, direction) -> RayHit | None:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ContractError("ray direction must be unit length")
    hit, idx, depth, cls = raycast_batch(grid, np.asarray(origin, float)[None], d[None])
    if not hit[0]:
        return None
    return RayHit(tuple(int(i) for i in idx[0]), float(depth[0]), int(cls[0]))


def default_rayset(occ: OccGridSpec, azimuths: int, elevations: int, origin=(0.0, 0.0, 0.0),
                   elevation_band=(-10.0, 10.0)) -> RaySet:
    """Regular azimuth x elevation lattice from one origin, elevation-major order.

    Azimuths are ``2 pi i / A``; elevations span the band in degrees
    (its midpoint when E = 1).
    """
    if azimuths < 1 or elevations < 1:
        raise ContractError("ray lattice needs at least one azimuth and one elevation")
    az = 2.0 * np.pi * np.arange(azimuths) / azimuths
    if elevations == 1:
        el = np.array([np.deg2rad(0.5 * (elevation_band[0] + elevation_band[1]))])
    else:
        el = np.deg2rad(np.linspace(elevation_band[0], elevation_band[1], elevations))
    ee, aa = np.meshgrid(el, az, indexing="ij")
    d = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # snap cardinal directions so axis-aligned rays are exact
    d[np.abs(d) < 1e-15] = 0.0
    return RaySet(np.tile(np.asarray(origin, float), (len(d), 1)), d)


@dataclass
class RayIoUResult:
    thresholds: tuple
    values: dict      # threshold -> RayIoU
    per_class: dict   # threshold -> {class id: IoU}

    @property
    def mean(self) -> float:
        return float(np.mean([self.values[t] for t in self.thresholds]))


def ray_outcomes(pred_hits, gt_hits, num_classes: int, thresholds):
    """TP/FP/FN per (threshold, class) from per-ray first hits.

    ``pred_hits``/``gt_hits`` are (hit, depth, cls) triples of arrays.
    """
    ph, pd, pc = pred_hits
    gh, gd, gc = gt_hits
    counts = {}
    for tau in thresholds:
        tp = np.zeros(num_classes, np.int64)
        fp = np.zeros(num_classes, np.int64)
        fn = np.zeros(num_classes, np.int64)
        both = ph & gh
        match = both & (pc == gc) & (np.abs(pd - gd) <= tau)
        np.add.at(tp, gc[match], 1)
        wrong = ph & ~match
        np.add.at(fp, pc[wrong], 1)
        missed = gh & ~match
        np.add.at(fn, gc[missed], 1)
        counts[tau] = (tp, fp, fn)
    return counts


def rayiou(pred: OccupancyGrid, gt: OccupancyGrid, rays: RaySet, thresholds=(1.0, 2.0, 4.0)) -> RayIoUResult:
    """Per-ray first-hit comparison at each depth tolerance.

    A ray is a true positive for its class when both grids hit the same class
    within the tolerance; otherwise a predicted hit is a false positive and a
    ground-truth hit a false negative. Classes seen by ground-truth rays are averaged.
    """
    _check_pair(pred, gt)
    thresholds = tuple(sorted(float(t) for t in thresholds))
    k = max(pred.num_classes, gt.num_classes)
    ph, _, pd, pc = raycast_batch(pred, rays.origins, rays.directions)
    gh, _, gd, gc = raycast_batch(gt, rays.origins, rays.directions)
    counts = ray_outcomes((ph, pd, pc), (gh, gd, gc), k, thresholds)
    present = sorted(set(int(c) for c in gc[gh]))
    values, per_class = {}, {}
    for tau in thresholds:
        tp, fp, fn = counts[tau]
        ious = {c: float(tp[c] / (tp[c] + fp[c] + fn[c])) for c in present}
        per_class[tau] = ious
        if present:
            values[tau] = float(np.mean(list(ious.values())))
        else:
            values[tau] = 1.0 if not np.any(ph) else 0.0
    return RayIoUResult(thresholds, values, per_class)

