"""BEV fusion: height compression, concat fusion, the residual BEV encoder,
grid-sample realignment onto the occupancy lattice and Channel-to-Height.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .geom import Transform, apply_transform, normalize_bev_coords
from .layers import conv1x1, conv2d, init_weight, relu, upsample_bilinear

# Continuous sample positions this close to a cell centre are snapped onto it.
SNAP_TOL = 1e-9


@dataclass(frozen=True)
class BevTensor:
    """(C, H', W') feature map indexed [c, y, x] covering a metric XY extent."""

    data: np.ndarray
    min_xy: tuple
    max_xy: tuple

    @property
    def shape(self):
        return self.data.shape

    @property
    def cell_size(self) -> np.ndarray:
        _, h, w = self.data.shape
        return (np.asarray(self.max_xy, float) - np.asarray(self.min_xy, float)) / np.array([w, h])

    def with_data(self, data: np.ndarray) -> "BevTensor":
        return BevTensor(data, self.min_xy, self.max_xy)

    def cell_centers(self):
        """(xs, ys) metric coordinates of column and row centres."""
        _, h, w = self.data.shape
        cs = self.cell_size
        xs = self.min_xy[0] + (np.arange(w) + 0.5) * cs[0]
        ys = self.min_xy[1] + (np.arange(h) + 0.5) * cs[1]
        return xs, ys


@dataclass(frozen=True)
class OccGridSpec:
    """Occupancy lattice (X_o, Y_o, Z_o) in its own frame; ``t_o2l`` maps it to the LiDAR frame."""

    min_bound: tuple
    max_bound: tuple
    voxel_size: tuple
    t_o2l: Transform = field(default_factory=Transform)

    def __post_init__(self):
        lo = np.asarray(self.min_bound, float)
        hi = np.asarray(self.max_bound, float)
        vs = np.broadcast_to(np.asarray(self.voxel_size, float), (3,))
        if np.any(vs <= 0):
            raise ConfigError("occupancy voxel size must be positive")
        n = (hi - lo) / vs
        if np.any(np.abs(n - np.round(n)) > 1e-6) or np.any(np.round(n) < 1):
            raise ConfigError(f"occupancy extent {lo.tolist()}..{hi.tolist()} is not a whole number of voxels")
        object.__setattr__(self, "min_bound", tuple(float(v) for v in lo))
        object.__setattr__(self, "max_bound", tuple(float(v) for v in hi))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in vs))

    @property
    def dims(self) -> tuple:
        lo, hi, vs = map(np.asarray, (self.min_bound, self.max_bound, self.voxel_size))
        return tuple(int(v) for v in np.round((hi - lo) / vs))

    @property
    def size(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def centers_xy(self) -> np.ndarray:
        """(X_o * Y_o, 3) cell centres in the XY plane (z = 0), x-major."""
        nx, ny, _ = self.dims
        xs = self.min_bound[0] + (np.arange(nx) + 0.5) * self.voxel_size[0]
        ys = self.min_bound[1] + (np.arange(ny) + 0.5) * self.voxel_size[1]
        xx, yy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)

    def centers(self) -> np.ndarray:
        """(X_o * Y_o * Z_o, 3) voxel centres in linear order (x * Y_o + y) * Z_o + z."""
        nx, ny, nz = self.dims
        axes = [self.min_bound[i] + (np.arange(n) + 0.5) * self.voxel_size[i] for i, n in enumerate((nx, ny, nz))]
        xx, yy, zz = np.meshgrid(*axes, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def to_dict(self) -> dict:
        return {"min_bound": list(self.min_bound), "max_bound": list(self.max_bound),
                "voxel_size": list(self.voxel_size), "t_o2l": self.t_o2l.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "OccGridSpec":
        t = Transform.from_dict(d["t_o2l"]) if "t_o2l" in d else Transform()
        return cls(tuple(d["min_bound"]), tuple(d["max_bound"]), tuple(d["voxel_size"]), t)


def height_compress(volume: np.ndarray, weights: np.ndarray, min_xy, max_xy) -> BevTensor:
    """Stack the Z slices of a (C, Z, H', W') volume into channels, then 1x1 conv.

    Stacked channel ``c * Z + z`` holds slice z of channel c.
    """
    c, z, h, w = volume.shape
    stacked = volume.reshape(c * z, h, w)
    return BevTensor(conv1x1(stacked, weights), tuple(min_xy), tuple(max_xy))


def fuse_bev(bev_cam: BevTensor, bev_lidar: BevTensor, weights: np.ndarray) -> BevTensor:
    """Concatenate [camera; lidar] along channels and apply one 3x3 conv."""
    if bev_cam.data.shape[1:] != bev_lidar.data.shape[1:]:
        raise ConfigError(f"BEV spatial dims differ: {bev_cam.data.shape[1:]} vs {bev_lidar.data.shape[1:]}")
    if not (np.allclose(bev_cam.min_xy, bev_lidar.min_xy, atol=1e-9)
            and np.allclose(bev_cam.max_xy, bev_lidar.max_xy, atol=1e-9)):
        raise ConfigError("camera and lidar BEV extents differ")
    x = np.concatenate([bev_cam.data, bev_lidar.data], axis=0)
    return bev_lidar.with_data(conv2d(x, weights))


@dataclass
class ResStage:
    conv1: np.ndarray
    conv2: np.ndarray
    skip: np.ndarray | None  # (C_out, C_in) 1x1 projection, None for identity
    stride: int = 1


@dataclass
class BevEncoder:
    stages: list
    fuse: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, in_channels: int = 48, widths=(48, 64, 64),
                  out_channels: int = 64) -> "BevEncoder":
        stages = []
        c_in = in_channels
        for i, (c_out, stride) in enumerate(zip(widths, (1, 2, 2))):
            name = f"bev.stage{i + 1}"
            skip = None
            if stride != 1 or c_in != c_out:
                skip = init_weight(seed, name + ".skip", (c_out, c_in))
            stages.append(ResStage(init_weight(seed, name + ".conv1", (c_out, c_in, 3, 3)),
                                   init_weight(seed, name + ".conv2", (c_out, c_out, 3, 3)),
                                   skip, stride))
            c_in = c_out
        fuse = init_weight(seed, "bev.fuse", (out_channels, widths[0] + widths[-1], 3, 3))
        return cls(stages, fuse)


def _res_stage(x: np.ndarray, st: ResStage, act: bool) -> np.ndarray:
    y = relu(conv2d(x, st.conv1, st.stride), act)
    y = conv2d(y, st.conv2)
    if st.skip is None:
        s = x
    else:
        s = conv1x1(x[:, ::st.stride, ::st.stride], st.skip)
    return relu(y + s, act)


def bev_encode(f: BevTensor, encoder: BevEncoder, activations: bool = True) -> BevTensor:
    """Three residual stages (strides 1, 2, 2); upsample the last x4, concat
    with the first, fuse with a 3x3 conv. Output keeps the input spatial dims."""
    _, h, w = f.data.shape
    if h % 4 or w % 4:
        raise ConfigError(f"BEV dims {(h, w)} must be divisible by 4")
    x = f.data
    outs = []
    for st in encoder.stages:
        x = _res_stage(x, st, activations)
        outs.append(x)
    f0, f2 = outs[0], outs[-1]
    merged = np.concatenate([f0, upsample_bilinear(f2, 4)], axis=0)
    out = conv2d(merged, encoder.fuse)
    if out.shape[1:] != (h, w):
        raise ContractError(f"BEV encoder changed spatial dims {(h, w)} -> {out.shape[1:]}")
    return f.with_data(out)


@dataclass(frozen=True)
class SamplePlan:
    """Bilinear gather of ``n`` output cells from a flattened (H' * W') map."""

    index: np.ndarray   # (n, 4) flat source indices
    weight: np.ndarray  # (n, 4); all-zero rows for out-of-extent samples
    source_shape: tuple
    out_shape: tuple

    def apply(self, data: np.ndarray) -> np.ndarray:
        c = data.shape[0]
        flat = data.reshape(c, -1)
        w = self.weight
        g = self.index
        out = (flat[:, g[:, 0]] * w[:, 0] + flat[:, g[:, 1]] * w[:, 1]
               + flat[:, g[:, 2]] * w[:, 2] + flat[:, g[:, 3]] * w[:, 3])
        return out.reshape((c,) + self.out_shape)

    def adjoint(self, grad_out: np.ndarray) -> np.ndarray:
        c = grad_out.shape[0]
        g = grad_out.reshape(c, -1)
        src = np.zeros((c, int(np.prod(self.source_shape))))
        for j in range(4):
            np.add.at(src.T, self.index[:, j], (g * self.weight[:, j]).T)
        return src.reshape((c,) + self.source_shape)


def _snap(p: np.ndarray) -> np.ndarray:
    r = np.round(p)
    return np.where(np.abs(p - r) <= SNAP_TOL, r, p)


def grid_sample_plan(grid_norm: np.ndarray, in_range: np.ndarray, h: int, w: int, out_shape) -> SamplePlan:
    """Plan bilinear sampling of an (H', W') map at normalised (x, y) positions.

    -1 / +1 are the outer edges of the map, so cell centres sit at
    ``-1 + (2i + 1) / n``. Positions outside [-1, 1] give zero; positions in the
    half-cell border band take the nearest edge value.
    """
    px = _snap(((grid_norm[:, 0] + 1.0) * w - 1.0) / 2.0)
    py = _snap(((grid_norm[:, 1] + 1.0) * h - 1.0) / 2.0)
    px = np.clip(px, 0.0, w - 1)
    py = np.clip(py, 0.0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = px - x0
    ay = py - y0
    index = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
    weight = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], axis=1)
    weight[~in_range] = 0.0
    index[~in_range] = 0
    return SamplePlan(index, weight, (h, w), tuple(out_shape))


def bvre_plan(bev: BevTensor, occ: OccGridSpec) -> SamplePlan:
    pts = apply_transform(occ.t_o2l, occ.centers_xy())
    g, in_range = normalize_bev_coords(pts[:, :2], bev.min_xy, bev.max_xy)
    _, h, w = bev.data.shape
    nx, ny, _ = occ.dims
    return grid_sample_plan(g, in_range, h, w, (nx, ny))


def bvre_sample(f: BevTensor, occ: OccGridSpec) -> np.ndarray:
    """Resample F_r at the occupancy cell centres; returns (C_r, X_o, Y_o)."""
    return bvre_plan(f, occ).apply(f.data)


@dataclass(frozen=True)
class AlignmentReport:
    x_ratio: float      # half-extent x / res_o
    y_ratio: float      # half-extent y / res_o
    res_ratio: float    # res_o / res_p
    x_integral: bool
    y_integral: bool
    res_integral: bool

    @property
    def aligned(self) -> bool:
        return self.x_integral and self.y_integral and self.res_integral

    def to_dict(self) -> dict:
        return {"x_ratio": self.x_ratio, "y_ratio": self.y_ratio, "res_ratio": self.res_ratio,
                "x_integral": self.x_integral, "y_integral": self.y_integral,
                "res_integral": self.res_integral, "aligned": self.aligned}


def _integral(r: float, tol: float = 1e-6) -> bool:
    return abs(r - round(r)) <= tol


def validate_alignment(occ: OccGridSpec, bev_spec) -> AlignmentReport:
    """Check whether the BEV range and voxel size line up with the occupancy lattice.

    ``bev_spec`` is any object with ``min_bound``, ``max_bound`` and ``voxel_size``
    (x, y, z) attributes, e.g. a :class:`occkit.voxel.GridSpec`.
    """
    res_o = occ.voxel_size[0]
    res_p = bev_spec.voxel_size[0]
    hx = (bev_spec.max_bound[0] - bev_spec.min_bound[0]) / 2.0
    hy = (bev_spec.max_bound[1] - bev_spec.min_bound[1]) / 2.0
    xr, yr, rr = hx / res_o, hy / res_o, res_o / res_p
    return AlignmentReport(xr, yr, rr, _integral(xr), _integral(yr), _integral(rr))


def channel_to_height(data: np.ndarray, z: int) -> np.ndarray:
    """(C * Z, X, Y) -> (C, Z, X, Y); channel c * Z + z becomes (c, z)."""
    cz = data.shape[0]
    if z < 1 or cz % z:
        raise ContractError(f"{cz} channels not divisible by height {z}")
    return data.reshape((cz // z, z) + data.shape[1:])


def height_to_channel(data: np.ndarray) -> np.ndarray:
    """Inverse of :func:`channel_to_height`."""
    return data.reshape((data.shape[0] * data.shape[1],) + data.shape[2:])


def occ_logits(f_occ: np.ndarray, weights: np.ndarray, k: int, z: int) -> np.ndarray:
    """1x1 occupancy head then Channel-to-Height: (C_r, X, Y) -> (K, Z, X, Y)."""
    if weights.shape[0] != k * z:
        raise ContractError(f"occupancy head has {weights.shape[0]} outputs, expected K*Z = {k * z}")
    return channel_to_height(conv1x1(f_occ, weights), z)
