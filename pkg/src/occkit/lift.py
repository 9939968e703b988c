"""Camera feature lifting: project voxel centres and bilinearly sample feature maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .geom import project_points
from .parallel import pmap


@dataclass(frozen=True)
class LiftSpec:
    """Voxel lattice of Z x H' x W' cells over a metric (x, y, z) extent."""

    min_bound: tuple
    max_bound: tuple
    counts: tuple  # (Z, H', W')
    channels: int

    def __post_init__(self):
        if len(self.counts) != 3 or any(int(c) < 1 for c in self.counts):
            raise ConfigError(f"lift counts must be three positive integers, got {self.counts}")
        if np.any(np.asarray(self.max_bound, float) <= np.asarray(self.min_bound, float)):
            raise ConfigError("lift extent must have max > min on every axis")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @property
    def cell_size(self) -> np.ndarray:
        z, h, w = self.counts
        return (np.asarray(self.max_bound, float) - np.asarray(self.min_bound, float)) / np.array([w, h, z])


def voxel_centers(spec: LiftSpec) -> np.ndarray:
    """Metric centres of all lift voxels, z-major then y then x."""
    nz, ny, nx = spec.counts
    lo = np.asarray(spec.min_bound, dtype=np.float64)
    cs = spec.cell_size
    zs = lo[2] + (np.arange(nz) + 0.5) * cs[2]
    ys = lo[1] + (np.arange(ny) + 0.5) * cs[1]
    xs = lo[0] + (np.arange(nx) + 0.5) * cs[0]
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def bilinear_sample_many(fmap: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample a (C, Hf, Wf) map at many (u, v); returns (N, C).

    Coordinates must lie inside [0, Wf-1] x [0, Hf-1].
    """
    c, hf, wf = fmap.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.size and (u.min() < 0 or v.min() < 0 or u.max() > wf - 1 or v.max() > hf - 1):
        raise ContractError("bilinear sample coordinates outside the feature map")
    u0 = np.minimum(np.floor(u).astype(np.int64), max(wf - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(hf - 2, 0))
    u1 = np.minimum(u0 + 1, wf - 1)
    v1 = np.minimum(v0 + 1, hf - 1)
    a = u - u0
    b = v - v0
    top = fmap[:, v0, u0] * (1 - a) + fmap[:, v0, u1] * a
    bot = fmap[:, v1, u0] * (1 - a) + fmap[:, v1, u1] * a
    out = top * (1 - b) + bot * b
    # exact pass-through at integer coordinates
    exact = (a == 0) & (b == 0)
    if np.any(exact):
        out[:, exact] = fmap[:, v0[exact], u0[exact]]
    return out.T


def bilinear_sample(fmap: np.ndarray, u: float, v: float) -> np.ndarray:
    return bilinear_sample_many(fmap, np.array([u]), np.array([v]))[0]


def lift_features(feature_maps, cameras, spec: LiftSpec) -> np.ndarray:
    """Lift per-camera (C, Hf, Wf) maps into a (C, Z, H', W') volume.

    Each voxel takes the mean of the samples from every camera that sees its
    centre strictly inside the sampling support; unseen voxels are zero.
    """
    if len(feature_maps) != len(cameras):
        raise ContractError("need one camera model per feature map")
    nz, ny, nx = spec.counts
    centers = voxel_centers(spec)
    if not feature_maps:
        return np.zeros((spec.channels, nz, ny, nx))
    c = feature_maps[0].shape[0]
    acc = np.zeros((len(centers), c))
    hits = np.zeros(len(centers), dtype=np.int64)

    def sample(pair):
        fmap, cam = pair
        fmap = np.asarray(fmap, dtype=np.float64)
        if fmap.shape != (c, cam.feature_height, cam.feature_width):
            raise ContractError(f"feature map shape {fmap.shape} does not match camera plane")
        u, v, valid, _ = project_points(cam, centers)
        valid &= (u < cam.feature_width - 1) & (v < cam.feature_height - 1)
        return valid, bilinear_sample_many(fmap, u[valid], v[valid])

    # accumulate in camera index order regardless of worker count
    for valid, vals in pmap(sample, list(zip(feature_maps, cameras))):
        acc[valid] += vals
        hits[valid] += 1
    seen = hits > 0
    acc[seen] /= hits[seen, None]
    return acc.T.reshape(c, nz, ny, nx)


def camera_count_map(cameras, spec: LiftSpec) -> np.ndarray:
    """Number of cameras contributing to each lift voxel, shape (Z, H', W')."""
    centers = voxel_centers(spec)
    hits = np.zeros(len(centers), dtype=np.int64)
    for cam in cameras:
        u, v, valid, _ = project_points(cam, centers)
        hits += valid & (u < cam.feature_width - 1) & (v < cam.feature_height - 1)
    return hits.reshape(spec.counts)
