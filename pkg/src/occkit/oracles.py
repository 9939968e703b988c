"""Slow brute-force references used to cross-check the fast paths.

Nothing here is used by the pipeline itself; the functions deliberately share
no code with the implementations they check.
"""
from __future__ import annotations

import math

import numpy as np


def dense_conv3d(x: np.ndarray, w: np.ndarray, stride=(1, 1, 1)) -> np.ndarray:
    """Direct zero-padded 3-D cross-correlation followed by stride decimation."""
    c_in, d, h, wd = x.shape
    c_out, _, k, _, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    full = np.zeros((c_out, d, h, wd))
    for a in range(k):
        for b in range(k):
            for c in range(k):
                patch = xp[:, a:a + d, b:b + h, c:c + wd]
                full += np.einsum("oi,idhw->odhw", w[:, :, a, b, c], patch)
    sz, sy, sx = stride
    return full[:, ::sz, ::sy, ::sx]


def dense_conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Quadruple-loop 2-D convolution with zero padding, unit stride."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = 0.0
                for c in range(c_in):
                    for a in range(k):
                        for b in range(k):
                            ii, jj = i + a - p, j + b - p
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += w[o, c, a, b] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def bilinear_point(grid2d: np.ndarray, u: float, v: float) -> float:
    """Closed-form bilinear value of a single-channel map at column u, row v."""
    h, w = grid2d.shape
    total = 0.0
    for r in range(h):
        for c in range(w):
            wu = max(0.0, 1.0 - abs(u - c))
            wv = max(0.0, 1.0 - abs(v - r))
            total += wu * wv * grid2d[r, c]
    return total


def march_first_hit(occupied: np.ndarray, grid_min, voxel_size, origin, direction,
                    step_fraction: float = 0.01, max_dist: float | None = None):
    """Fixed-step ray march; returns ((i, j, k), depth) or None.

    ``occupied`` is indexed [x, y, z]. The step is ``step_fraction`` of the
    smallest voxel edge.
    """
    vs = np.asarray(voxel_size, dtype=np.float64)
    lo = np.asarray(grid_min, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    n = np.array(occupied.shape)
    step = step_fraction * vs.min()
    if max_dist is None:
        max_dist = float(np.linalg.norm(n * vs)) + float(np.linalg.norm(o - lo)) + 1.0
    t = 0.0
    entered = False
    while t <= max_dist:
        idx = np.floor((o + t * d - lo) / vs).astype(np.int64)
        inside = bool(np.all((idx >= 0) & (idx < n)))
        if inside:
            entered = True
            if occupied[tuple(idx)]:
                return tuple(int(i) for i in idx), t
        elif entered:
            return None
        t += step
    return None


def march_first_hits(occupied: np.ndarray, grid_min, voxel_size, origins, directions,
                     step_fraction: float = 0.01):
    """``march_first_hit`` for many rays at once, stepping them in lockstep.

    Returns (hit, index (N, 3), depth) with depth NaN where nothing was hit.
    """
    vs = np.asarray(voxel_size, dtype=np.float64)
    lo = np.asarray(grid_min, dtype=np.float64)
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = np.array(occupied.shape)
    step = step_fraction * vs.min()
    far = float(np.linalg.norm(n * vs)) + float(np.max(np.linalg.norm(o - lo, axis=1), initial=0.0)) + 1.0
    nr = len(o)
    hit = np.zeros(nr, dtype=bool)
    depth = np.full(nr, np.nan)
    index = np.full((nr, 3), -1, dtype=np.int64)
    entered = np.zeros(nr, dtype=bool)
    live = np.ones(nr, dtype=bool)
    for i in range(int(far / step) + 2):
        if not live.any():
            break
        t = i * step
        r = np.flatnonzero(live)
        idx = np.floor((o[r] + t * d[r] - lo) / vs).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < n), axis=1)
        live[r[~inside & entered[r]]] = False
        ri, ii = r[inside], idx[inside]
        entered[ri] = True
        occ = occupied[ii[:, 0], ii[:, 1], ii[:, 2]]
        h = ri[occ]
        hit[h], depth[h], index[h] = True, t, ii[occ]
        live[h] = False
    return hit, index, depth


def central_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``; 0 if both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gaussian_value(dx: float, dy: float, sigma: float) -> float:
    return math.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
