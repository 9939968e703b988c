"""Seeded randomized comparisons of the fast kernels against the brute-force oracles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import dda_first_hit
from .oracles import dense_conv3d, march_first_hits
from .voxel import ConvKernel3D, SparseVoxelGrid, densify, sparse_conv3d


@dataclass
class SweepResult:
    name: str
    cases: int
    failures: int
    worst: float  # largest abs error (conv) or depth error / tolerance (rays)
    tolerance: float
    redrawn: int = 0

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_dict(self) -> dict:
        return {"name": self.name, "cases": self.cases, "failures": self.failures,
                "worst": self.worst, "tolerance": self.tolerance,
                "redrawn": self.redrawn, "passed": self.passed}


def random_sparse_grid(rng: np.random.Generator, max_dim: int = 8) -> SparseVoxelGrid:
    dims = tuple(int(v) for v in rng.integers(1, max_dim + 1, size=3))
    c_in = int(rng.integers(1, 4))
    occupied = rng.random(dims) < rng.uniform(0.05, 0.5)
    coords = np.argwhere(occupied)
    return SparseVoxelGrid(coords, rng.normal(size=(len(coords), c_in)), dims)


def _submanifold_reference(grid: SparseVoxelGrid, w: np.ndarray) -> np.ndarray:
    dense = dense_conv3d(densify(grid), w)
    active = np.zeros(grid.dims, dtype=bool)
    active[tuple(grid.coords.T)] = True
    return dense * active[None]


def sparse_conv_sweep(seed: int = 0, trials: int = 50, tol: float = 1e-5) -> list:
    """Sparse conv vs densify + dense conv, submanifold and regular modes."""
    results = []
    for mode in ("submanifold", "regular"):
        rng = np.random.default_rng([seed, 3, 0 if mode == "submanifold" else 1])
        worst, failures = 0.0, 0
        for _ in range(trials):
            grid = random_sparse_grid(rng)
            k = int(rng.choice([1, 3, 5]))
            c_out = int(rng.integers(1, 4))
            w = rng.normal(size=(c_out, grid.channels, k, k, k))
            if mode == "submanifold":
                stride = (1, 1, 1)
                ref = _submanifold_reference(grid, w)
            else:
                stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
                ref = dense_conv3d(densify(grid), w, stride)
            out = sparse_conv3d(grid, ConvKernel3D(w, stride, mode))
            got = densify(out)
            err = float(np.abs(got - ref).max()) if got.shape == ref.shape else np.inf
            worst = max(worst, err)
            failures += not err <= tol
        results.append(SweepResult(f"sparse_conv3d/{mode}", trials, failures, worst, tol))
    return results


def random_ray(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray):
    span = hi - lo
    origin = lo - 0.5 * span + rng.random(3) * 2.0 * span
    d = rng.normal(size=3)
    return origin, d / np.linalg.norm(d)


def grazing_rays(occupied: np.ndarray, lo, vs, origins, dirs, min_chord: float) -> np.ndarray:
    """Rays crossing some occupied voxel along a chord shorter than ``min_chord``.

    Brute-force slab test against every occupied voxel; such clips fall below
    the marching resolution and cannot be confirmed by it.
    """
    cells = np.argwhere(occupied)
    if len(cells) == 0:
        return np.zeros(len(origins), dtype=bool)
    vlo = lo + cells * vs  # (V, 3)
    vhi = vlo + vs
    o = origins[:, None, :]
    d = dirs[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (vlo[None] - o) / d
        b = (vhi[None] - o) / d
    inside_slab = (o >= vlo[None]) & (o < vhi[None])
    t0 = np.where(d != 0, np.minimum(a, b), np.where(inside_slab, -np.inf, np.inf)).max(axis=2)
    t1 = np.where(d != 0, np.maximum(a, b), np.where(inside_slab, np.inf, -np.inf)).min(axis=2)
    chord = t1 - np.maximum(t0, 0.0)
    return np.any((chord > 0) & (chord < min_chord), axis=1)


def raycast_sweep(seed: int = 0, grids: int = 20, rays: int = 100) -> SweepResult:
    """Vectorised DDA vs fixed-step marching at 1/100 of the voxel edge.

    Rays are drawn in general position: candidates that clip an occupied voxel
    by less than two marching steps are redrawn. ``worst`` is the largest
    depth error as a fraction of the tolerance.
    """
    rng = np.random.default_rng([seed, 4])
    worst, failures, cases, redrawn = 0.0, 0, 0, 0
    for _ in range(grids):
        occupied = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.2)
        vs = np.full(3, float(rng.uniform(0.2, 1.0)))
        lo = rng.uniform(-4.0, 4.0, size=3)
        tol = float(vs.min()) / 100.0
        hi = lo + 8 * vs
        origins, dirs = [], []
        while len(origins) < rays:
            o, d = random_ray(rng, lo, hi)
            if grazing_rays(occupied, lo, vs, o[None], d[None], 2 * tol)[0]:
                redrawn += 1
                continue
            origins.append(o)
            dirs.append(d)
        origins, dirs = np.array(origins), np.array(dirs)
        hit, idx, depth = dda_first_hit(occupied, lo, vs, origins, dirs)
        ref_hit, ref_idx, ref_depth = march_first_hits(occupied, lo, vs, origins, dirs)
        cases += rays
        both = hit & ref_hit
        err = np.abs(depth[both] - ref_depth[both])
        worst = max(worst, float(err.max(initial=0.0)) / tol)
        bad = hit != ref_hit
        bad[both] |= np.any(idx[both] != ref_idx[both], axis=1) | (err > tol)
        failures += int(bad.sum())
    return SweepResult("dda_first_hit", cases, failures, worst, 1.0, redrawn)
