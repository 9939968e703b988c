"""Point-cloud voxelisation and the sparse 3-D convolution LiDAR encoder."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .layers import init_weight, relu


@dataclass(frozen=True)
class GridSpec:
    """Metric voxel lattice. Bounds and sizes are (x, y, z); dims are (D, H, W) = (z, y, x)."""

    min_bound: tuple
    max_bound: tuple
    voxel_size: tuple

    def __post_init__(self):
        lo = np.asarray(self.min_bound, dtype=np.float64)
        hi = np.asarray(self.max_bound, dtype=np.float64)
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or vs.shape != (3,):
            raise ConfigError("grid bounds and voxel size must be 3-vectors")
        if np.any(vs <= 0):
            raise ConfigError(f"voxel size must be positive, got {vs.tolist()}")
        n = (hi - lo) / vs
        if np.any(np.abs(n - np.round(n)) > 1e-6) or np.any(np.round(n) < 1):
            raise ConfigError(f"extent {lo.tolist()}..{hi.tolist()} is not a whole number of voxels {vs.tolist()}")
        object.__setattr__(self, "min_bound", tuple(float(v) for v in lo))
        object.__setattr__(self, "max_bound", tuple(float(v) for v in hi))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in vs))

    @property
    def counts_xyz(self) -> tuple:
        lo, hi, vs = map(np.asarray, (self.min_bound, self.max_bound, self.voxel_size))
        return tuple(int(v) for v in np.round((hi - lo) / vs))

    @property
    def dims(self) -> tuple:
        nx, ny, nz = self.counts_xyz
        return (nz, ny, nx)

    def to_dict(self) -> dict:
        return {"min_bound": list(self.min_bound), "max_bound": list(self.max_bound),
                "voxel_size": list(self.voxel_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["min_bound"]), tuple(d["max_bound"]), tuple(d["voxel_size"]))


@dataclass
class SparseVoxelGrid:
    """Active voxels as (N, 3) integer (d, h, w) coordinates plus (N, C) features."""

    coords: np.ndarray
    feats: np.ndarray
    dims: tuple

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise ContractError("feature rows must match coordinate rows")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.coords) and (np.any(self.coords < 0) or np.any(self.coords >= np.array(self.dims))):
            raise ContractError("voxel coordinates outside grid dims")

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def __len__(self):
        return self.coords.shape[0]

    def keys(self) -> np.ndarray:
        return linear_keys(self.coords, self.dims)


def linear_keys(coords: np.ndarray, dims) -> np.ndarray:
    d, h, w = dims
    return (coords[:, 0] * h + coords[:, 1]) * w + coords[:, 2]


def voxelize(cloud: np.ndarray, spec: GridSpec, max_points: int = 10) -> SparseVoxelGrid:
    """Mean-pool the first ``max_points`` points (input order) of every voxel.

    ``cloud`` is an (N, 4) array of (x, y, z, intensity). Output voxels are
    sorted by (d, h, w).
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 4)
    dims = spec.dims
    if len(pts) == 0:
        return SparseVoxelGrid(np.zeros((0, 3), np.int64), np.zeros((0, 4)), dims)
    if not np.all(np.isfinite(pts)):
        raise ContractError("point cloud contains non-finite values")
    idx_xyz = np.floor((pts[:, :3] - np.asarray(spec.min_bound)) / np.asarray(spec.voxel_size)).astype(np.int64)
    coords = idx_xyz[:, ::-1]
    inside = np.all((coords >= 0) & (coords < np.array(dims)), axis=1)
    pts, coords = pts[inside], coords[inside]
    if len(pts) == 0:
        return SparseVoxelGrid(np.zeros((0, 3), np.int64), np.zeros((0, 4)), dims)

    keys = linear_keys(coords, dims)
    order = np.argsort(keys, kind="stable")
    keys, pts, coords = keys[order], pts[order], coords[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    group = np.cumsum(np.r_[True, keys[1:] != keys[:-1]]) - 1
    rank = np.arange(len(keys)) - starts[group]
    keep = rank < max_points
    n_vox = len(starts)
    sums = np.zeros((n_vox, 4))
    np.add.at(sums, group[keep], pts[keep])
    counts = np.bincount(group[keep], minlength=n_vox)
    return SparseVoxelGrid(coords[starts], sums / counts[:, None], dims)


def densify(grid: SparseVoxelGrid) -> np.ndarray:
    """(C, D, H, W) dense tensor, zero outside active voxels."""
    out = np.zeros((grid.channels,) + tuple(grid.dims))
    if len(grid):
        c = grid.coords
        out[:, c[:, 0], c[:, 1], c[:, 2]] = grid.feats.T
    return out


@dataclass
class ConvKernel3D:
    """Weights (C_out, C_in, k, k, k) for a sparse convolution."""

    weights: np.ndarray
    stride: tuple = (1, 1, 1)
    mode: str = "submanifold"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 5 or len(set(self.weights.shape[2:])) != 1:
            raise ContractError("kernel must have shape (C_out, C_in, k, k, k)")
        if self.k % 2 == 0:
            raise ContractError("kernel size must be odd")
        if isinstance(self.stride, int):
            self.stride = (self.stride,) * 3
        self.stride = tuple(int(s) for s in self.stride)
        if any(s < 1 for s in self.stride):
            raise ContractError("stride must be >= 1")
        if self.mode not in ("submanifold", "regular"):
            raise ContractError(f"unknown conv mode {self.mode!r}")
        if self.mode == "submanifold" and self.stride != (1, 1, 1):
            raise ContractError("submanifold convolution requires unit stride")

    @property
    def k(self) -> int:
        return self.weights.shape[2]


def _kernel_offsets(k: int):
    return [np.array(o) for o in itertools.product(range(k), repeat=3)]


def _lookup(sorted_keys: np.ndarray, coords: np.ndarray, dims):
    inside = np.all((coords >= 0) & (coords < np.array(dims)), axis=1)
    keys = np.where(inside, linear_keys(np.where(inside[:, None], coords, 0), dims), -1)
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, max(len(sorted_keys) - 1, 0))
    found = inside & (len(sorted_keys) > 0)
    if len(sorted_keys):
        found &= sorted_keys[pos] == keys
    return found, pos


def sparse_conv3d(grid: SparseVoxelGrid, kernel: ConvKernel3D) -> SparseVoxelGrid:
    """Sparse 3-D convolution with zero padding k // 2.

    Submanifold mode keeps the input active set. Regular mode activates every
    site reached by at least one active input, then keeps sites whose
    coordinates are divisible by the stride and divides them.
    Contributions are accumulated kernel offset by offset in a fixed order.
    """
    c_out, c_in = kernel.weights.shape[:2]
    if c_in != grid.channels:
        raise ContractError(f"kernel expects {c_in} input channels, grid has {grid.channels}")
    k = kernel.k
    pad = k // 2
    stride = np.array(kernel.stride)
    offsets = _kernel_offsets(k)
    in_keys = grid.keys()  # already sorted when produced by this module
    if len(in_keys) > 1 and np.any(in_keys[1:] <= in_keys[:-1]):
        order = np.argsort(in_keys, kind="stable")
        grid = SparseVoxelGrid(grid.coords[order], grid.feats[order], grid.dims)
        in_keys = in_keys[order]

    if kernel.mode == "submanifold":
        out_dims = grid.dims
        out_coords = grid.coords
    else:
        out_dims = tuple(int((d - 1) // s + 1) for d, s in zip(grid.dims, kernel.stride))
        cand = []
        for off in offsets:
            q = grid.coords - off + pad
            ok = np.all((q >= 0) & (q < np.array(grid.dims)) & (q % stride == 0), axis=1)
            cand.append(q[ok] // stride)
        cand = np.concatenate(cand) if cand else np.zeros((0, 3), np.int64)
        if len(cand):
            ukeys = np.unique(linear_keys(cand, out_dims))
            _, h, w = out_dims
            out_coords = np.stack([ukeys // (h * w), (ukeys // w) % h, ukeys % w], axis=1)
        else:
            out_coords = np.zeros((0, 3), np.int64)

    out = np.zeros((len(out_coords), c_out))
    if len(out_coords) == 0 or len(grid) == 0:
        return SparseVoxelGrid(out_coords, out, out_dims)
    base = out_coords * stride - pad
    for off in offsets:
        found, pos = _lookup(in_keys, base + off, grid.dims)
        if not np.any(found):
            continue
        w_k = kernel.weights[:, :, off[0], off[1], off[2]]
        out[found] += grid.feats[pos[found]] @ w_k.T
    return SparseVoxelGrid(out_coords, out, out_dims)


def relu_sparse(grid: SparseVoxelGrid, enabled: bool = True) -> SparseVoxelGrid:
    return SparseVoxelGrid(grid.coords, relu(grid.feats, enabled), grid.dims)


@dataclass
class LidarEncoder:
    """Four-stage bias-free sparse encoder: subm 4->C, then strides (2,2,2), (2,2,2), (4,2,2)."""

    layers: list

    @classmethod
    def from_seed(cls, seed: int, in_channels: int = 4, channels: int = 32, k: int = 3) -> "LidarEncoder":
        plan = [("lidar.subm1", in_channels, (1, 1, 1), "submanifold"),
                ("lidar.down1", channels, (2, 2, 2), "regular"),
                ("lidar.down2", channels, (2, 2, 2), "regular"),
                ("lidar.down3", channels, (4, 2, 2), "regular")]
        layers = [ConvKernel3D(init_weight(seed, name, (channels, c_in, k, k, k)), stride, mode)
                  for name, c_in, stride, mode in plan]
        return cls(layers)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].weights.shape[0]


def lidar_encode(grid: SparseVoxelGrid, encoder: LidarEncoder, activations: bool = True) -> np.ndarray:
    """Encode voxels into a dense (C, D/16, H/8, W/8) tensor."""
    d, h, w = grid.dims
    if d % 16 or h % 8 or w % 8:
        raise ConfigError(f"grid dims {grid.dims} must be divisible by (16, 8, 8)")
    x = grid
    for i, kernel in enumerate(encoder.layers):
        x = sparse_conv3d(x, kernel)
        if i < len(encoder.layers) - 1:
            x = relu_sparse(x, activations)
    out = densify(x)
    expected = (encoder.out_channels, d // 16, h // 8, w // 8)
    if out.shape != expected:
        raise ContractError(f"lidar encoder produced {out.shape}, expected {expected}")
    return out


def read_points(path) -> np.ndarray:
    """Load little-endian float32 (x, y, z, intensity) records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ContractError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)


def write_points(path, cloud: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(np.asarray(cloud).reshape(-1, 4), dtype="<f4").tobytes())
