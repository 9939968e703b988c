"""Pipeline configuration with the desk-scale defaults."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .bevfuse import OccGridSpec
from .errors import ConfigError
from .geom import Transform
from .heads import FocalParams, LossWeights
from .lift import LiftSpec
from .scenegen import SceneSpec, SensorRig, default_rig
from .voxel import GridSpec


@dataclass
class PipelineConfig:
    seed: int = 0
    # LiDAR lattice: 128 x 128 x 16 voxels
    lidar_min: tuple = (-12.8, -12.8, -2.4)
    lidar_max: tuple = (12.8, 12.8, 2.4)
    lidar_voxel: tuple = (0.2, 0.2, 0.3)
    max_points: int = 10
    lidar_channels: int = 32
    # camera lifting volume: Z x H/8 x W/8
    lift_levels: int = 8
    camera_channels: int = 16
    # occupancy lattice: 64 x 64 x 12
    occ_min: tuple = (-12.8, -12.8, -2.4)
    occ_max: tuple = (12.8, 12.8, 2.4)
    occ_voxel: float = 0.4
    t_o2l: dict = field(default_factory=lambda: Transform().to_dict())
    fuse_channels: int = 48
    bev_widths: tuple = (48, 64, 64)
    bev_channels: int = 64
    num_classes: int = 6
    num_det_classes: int = 4
    free_class: int = 0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    lam: float = 0.01
    lam_l: float = 0.25
    dropout_ratio: float = 0.8
    use_camera_mask: bool = False
    fit_steps: int = 200
    fit_lr: float = 1.0
    ray_azimuths: int = 180
    ray_elevations: int = 8
    ray_origin: tuple = (0.0, 0.0, 0.0)
    ray_elevation_band: tuple = (-10.0, 10.0)
    thresholds: tuple = (1.0, 2.0, 4.0)
    box_count: tuple = (6, 10)
    ground_z: float = -1.6
    n_cameras: int = 6
    feature_width: int = 64
    feature_height: int = 24
    hfov_deg: float = 70.0
    lidar_azimuths: int = 1024
    lidar_elevations: tuple = (-30.0, 10.0, 32)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        self.validate()

    # derived specs ---------------------------------------------------------
    @property
    def lidar_grid(self) -> GridSpec:
        return GridSpec(self.lidar_min, self.lidar_max, self.lidar_voxel)

    @property
    def lift_spec(self) -> LiftSpec:
        d, h, w = self.lidar_grid.dims
        return LiftSpec(self.lidar_min, self.lidar_max, (self.lift_levels, h // 8, w // 8), self.camera_channels)

    @property
    def occ_spec(self) -> OccGridSpec:
        return OccGridSpec(self.occ_min, self.occ_max, (self.occ_voxel,) * 3, Transform.from_dict(self.t_o2l))

    @property
    def bev_extent(self):
        return tuple(self.lidar_min[:2]), tuple(self.lidar_max[:2])

    @property
    def focal(self) -> FocalParams:
        return FocalParams(self.focal_alpha, self.focal_beta)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lam, self.lam_l)

    @property
    def scene_spec(self) -> SceneSpec:
        return SceneSpec(tuple(self.occ_min[:2]), tuple(self.occ_max[:2]), tuple(self.box_count),
                         self.ground_z, self.occ_max[2])

    def rig(self) -> SensorRig:
        return default_rig(self.n_cameras, self.feature_width, self.feature_height, self.hfov_deg,
                           lidar_azimuths=self.lidar_azimuths, lidar_elevations=tuple(self.lidar_elevations))

    def validate(self) -> None:
        d, h, w = self.lidar_grid.dims
        if d % 16 or h % 8 or w % 8:
            raise ConfigError(f"LiDAR grid dims (D, H, W) = {(d, h, w)} must be divisible by (16, 8, 8)")
        if (h // 8) % 4 or (w // 8) % 4:
            raise ConfigError("BEV dims H/8, W/8 must be divisible by 4 for the BEV encoder")
        self.occ_spec  # raises on a non-integral lattice
        if self.camera_channels < self.num_classes:
            raise ConfigError("camera_channels must be >= num_classes")
        if not 0.0 <= self.dropout_ratio <= 1.0:
            raise ConfigError("dropout_ratio must lie in [0, 1]")
        if self.bev_widths[0] != self.fuse_channels:
            raise ConfigError("first BEV stage width must equal fuse_channels")

    # serialisation ---------------------------------------------------------
    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


def default_config() -> PipelineConfig:
    return PipelineConfig()

