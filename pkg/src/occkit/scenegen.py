"""Seeded synthetic scenes: yawed boxes on a ground plane, a spinning LiDAR,
a surround camera rig, ground-truth occupancy and camera visibility."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Point, Polygon

from .bevfuse import OccGridSpec
from .errors import ConfigError, GenerationError
from .geom import CameraModel, Transform, apply_transform, pixel_rays, project_points
from .heads import Box3D
from .metrics import OccupancyGrid, dda_first_hit
from .parallel import pmap

FREE, GROUND, VEHICLE, PEDESTRIAN, BARRIER, VEGETATION = range(6)
CLASS_NAMES = ("free", "ground", "vehicle", "pedestrian", "barrier", "vegetation")
# detection class id -> semantic class id
DET_TO_SEM = (VEHICLE, PEDESTRIAN, BARRIER, VEGETATION)
# nominal (l, w, h) per detection class; sampled sizes are jittered by +-15 %
BOX_TEMPLATES = ((4.5, 1.9, 1.6), (0.75, 0.75, 1.8), (2.0, 0.7, 1.0), (2.0, 2.0, 2.4))
INTENSITY_STEP = 0.2
MAX_ATTEMPTS = 1000


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode("utf-8"))])


@dataclass(frozen=True)
class SceneSpec:
    min_xy: tuple = (-12.8, -12.8)
    max_xy: tuple = (12.8, 12.8)
    box_count: tuple = (6, 10)
    ground_z: float = -1.6
    z_max: float = 2.4
    clear_radius: float = 2.5  # keep boxes off the sensor rig

    def __post_init__(self):
        lo, hi = self.box_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid box count range {self.box_count}")


@dataclass
class Scene:
    ground_z: float
    boxes: list
    min_xy: tuple
    max_xy: tuple
    seed: int

    def semantic(self, box: Box3D) -> int:
        return DET_TO_SEM[box.cls]

    def to_dict(self) -> dict:
        return {"ground_z": self.ground_z, "boxes": [b.to_dict() for b in self.boxes],
                "min_xy": list(self.min_xy), "max_xy": list(self.max_xy), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(float(d["ground_z"]), [Box3D.from_dict(b) for b in d["boxes"]],
                   tuple(d["min_xy"]), tuple(d["max_xy"]), int(d["seed"]))


def box_footprint(box: Box3D) -> np.ndarray:
    """(4, 2) XY corners of a yawed box."""
    l, w, _ = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[l, w], [l, -w], [-l, -w], [-l, w]]) / 2.0
    return local @ np.array([[c, s], [-s, c]]) + np.asarray(box.center[:2])


def overlap_volume(a: Box3D, b: Box3D) -> float:
    area = Polygon(box_footprint(a)).intersection(Polygon(box_footprint(b))).area
    lo = max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    hi = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    return area * max(0.0, hi - lo)


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()) -> Scene:
    """Rejection-sample non-overlapping boxes resting on the ground plane.

    No pair of boxes shares more than 10 % of the smaller box's volume.
    """
    rng = _rng(seed, "scene")
    n_boxes = int(rng.integers(spec.box_count[0], spec.box_count[1] + 1))
    lo, hi = np.asarray(spec.min_xy, float), np.asarray(spec.max_xy, float)
    extent = Polygon([(lo[0], lo[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo[0], hi[1])])
    keep_out = Point(0.0, 0.0).buffer(spec.clear_radius)
    boxes = []
    attempts = 0
    while len(boxes) < n_boxes:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(f"placed {len(boxes)}/{n_boxes} boxes after {MAX_ATTEMPTS} attempts (seed {seed})")
        cls = int(rng.integers(0, len(BOX_TEMPLATES)))
        size = tuple(float(s) for s in np.asarray(BOX_TEMPLATES[cls]) * rng.uniform(0.85, 1.15, size=3))
        xy = rng.uniform(lo, hi)
        yaw = float(rng.uniform(-math.pi, math.pi))
        center = (float(xy[0]), float(xy[1]), spec.ground_z + size[2] / 2.0)
        box = Box3D(center, size, yaw, cls)
        foot = Polygon(box_footprint(box))
        if not extent.contains(foot) or foot.intersects(keep_out):
            continue
        if spec.ground_z + size[2] > spec.z_max:
            continue
        vol = size[0] * size[1] * size[2]
        if any(overlap_volume(box, o) > 0.1 * min(vol, float(np.prod(o.size))) for o in boxes):
            continue
        boxes.append(box)
    return Scene(spec.ground_z, boxes, tuple(spec.min_xy), tuple(spec.max_xy), int(seed))


def _to_local(box: Box3D, pts: np.ndarray, dirs: np.ndarray | None = None):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box
    p = (pts - np.asarray(box.center)) @ rot.T
    return p if dirs is None else (p, dirs @ rot.T)


def points_in_box(box: Box3D, pts: np.ndarray) -> np.ndarray:
    """Strict interior test (faces excluded)."""
    p = _to_local(box, pts)
    return np.all(np.abs(p) < np.asarray(box.size) / 2.0, axis=1)


def ray_box(box: Box3D, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Entry distance of each ray into the box, inf on miss."""
    p, d = _to_local(box, origins, dirs)
    half = np.asarray(box.size) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - p) * inv
        t2 = (half - p) * inv
    t1 = np.where(d == 0, np.where(np.abs(p) < half, -np.inf, np.inf), t1)
    t2 = np.where(d == 0, np.where(np.abs(p) < half, np.inf, -np.inf), t2)
    near = np.minimum(t1, t2).max(axis=1)
    far = np.maximum(t1, t2).min(axis=1)
    ok = (near <= far) & (near > 1e-9)
    return np.where(ok, near, np.inf)


def cast_scene(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest analytic hit against boxes and ground; returns (t, semantic class)."""
    origins = np.broadcast_to(origins, dirs.shape)
    best = np.full(len(dirs), np.inf)
    cls = np.zeros(len(dirs), dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (scene.ground_z - origins[:, 2]) / dirs[:, 2]
    tg = np.where((dirs[:, 2] < 0) & (origins[:, 2] > scene.ground_z), tg, np.inf)
    closer = tg < best
    best[closer], cls[closer] = tg[closer], GROUND
    for box in scene.boxes:
        t = ray_box(box, origins, dirs)
        closer = t < best
        best[closer], cls[closer] = t[closer], scene.semantic(box)
    return best, cls


@dataclass
class SensorRig:
    lidar_origin: tuple = (0.0, 0.0, 0.0)
    lidar_azimuths: int = 1024
    lidar_elevations: tuple = (-30.0, 10.0, 32)  # (low deg, high deg, beam count)
    lidar_max_range: float = 70.0
    cameras: list = field(default_factory=list)

    def beam_directions(self) -> np.ndarray:
        lo, hi, n = self.lidar_elevations
        el = np.deg2rad(np.linspace(lo, hi, int(n)))
        az = 2.0 * np.pi * np.arange(self.lidar_azimuths) / self.lidar_azimuths
        ee, aa = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {"lidar_origin": list(self.lidar_origin), "lidar_azimuths": self.lidar_azimuths,
                "lidar_elevations": list(self.lidar_elevations), "lidar_max_range": self.lidar_max_range,
                "cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorRig":
        return cls(tuple(d["lidar_origin"]), int(d["lidar_azimuths"]), tuple(d["lidar_elevations"]),
                   float(d["lidar_max_range"]), [CameraModel.from_dict(c) for c in d["cameras"]])


def surround_camera(yaw: float, width: int = 64, height: int = 24, hfov_deg: float = 70.0,
                    position=(0.0, 0.0, 0.0)) -> CameraModel:
    """Level camera looking along ``yaw`` (x right, y down, z forward)."""
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])  # ref -> cam rows
    pos = np.asarray(position, dtype=np.float64)
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return CameraModel(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                       Transform(rot, -rot @ pos))


def default_rig(n_cameras: int = 6, feature_width: int = 64, feature_height: int = 24,
                hfov_deg: float = 70.0, camera_offset: float = 0.3, **lidar) -> SensorRig:
    cams = []
    for i in range(n_cameras):
        yaw = 2.0 * math.pi * i / n_cameras
        pos = (camera_offset * math.cos(yaw), camera_offset * math.sin(yaw), 0.0)
        cams.append(surround_camera(yaw, feature_width, feature_height, hfov_deg, pos))
    return SensorRig(cameras=cams, **lidar)


def rasterize_gt(scene: Scene, occ: OccGridSpec, num_classes: int = 6) -> OccupancyGrid:
    """Label voxel centres: box class (later boxes win), else ground below the plane, else free."""
    centers = apply_transform(occ.t_o2l, occ.centers())
    labels = np.where(centers[:, 2] < scene.ground_z, GROUND, FREE).astype(np.int64)
    for box in scene.boxes:
        labels[points_in_box(box, centers)] = scene.semantic(box)
    return OccupancyGrid(occ, labels.reshape(occ.dims), None, num_classes)


def simulate_lidar(scene: Scene, rig: SensorRig) -> np.ndarray:
    """One return per beam at the nearest analytic hit; (N, 4) x, y, z, intensity."""
    dirs = rig.beam_directions()
    origin = np.asarray(rig.lidar_origin, dtype=np.float64)
    t, cls = cast_scene(scene, origin[None], dirs)
    hit = t <= rig.lidar_max_range
    pts = origin + t[hit, None] * dirs[hit]
    noise = _rng(scene.seed, "lidar.intensity").normal(0.0, 0.01, size=int(hit.sum()))
    intensity = INTENSITY_STEP * cls[hit] + noise
    return np.column_stack([pts, intensity])


def render_camera_features(scene: Scene, rig: SensorRig, channels: int = 16, num_classes: int = 6):
    """Per camera a (C_p, H_f, W_f) map: one-hot class of the first hit scaled by 1/(1+depth)."""
    if channels < num_classes:
        raise ConfigError(f"need at least {num_classes} feature channels, got {channels}")

    def render(cam):
        dirs, z_per_unit = pixel_rays(cam)
        t, cls = cast_scene(scene, cam.origin[None], dirs)
        fmap = np.zeros((channels, cam.feature_height * cam.feature_width))
        hit = np.isfinite(t)
        depth = t[hit] * z_per_unit[hit]
        fmap[cls[hit], np.flatnonzero(hit)] = 1.0 / (1.0 + depth)
        return fmap.reshape(channels, cam.feature_height, cam.feature_width)

    return pmap(render, rig.cameras)


def camera_visibility_mask(gt: OccupancyGrid, rig: SensorRig) -> np.ndarray:
    """Voxels whose centre lies in some camera frustum with a clear line of sight."""
    occ = gt.spec
    centers_o = occ.centers()
    centers_l = apply_transform(occ.t_o2l, centers_o)
    inv = occ.t_o2l.inverse()
    target = np.arange(len(centers_o))
    visible = np.zeros(len(centers_o), dtype=bool)
    occupied = gt.occupied
    ny, nz = occ.dims[1], occ.dims[2]
    for cam in rig.cameras:
        _, _, in_view, _ = project_points(cam, centers_l)
        cand = np.flatnonzero(in_view & ~visible)
        if len(cand) == 0:
            continue
        origin_o = apply_transform(inv, cam.origin[None])[0]
        vec = centers_o[cand] - origin_o
        dist = np.linalg.norm(vec, axis=1)
        dirs = vec / dist[:, None]
        hit, idx, _ = dda_first_hit(occupied, occ.min_bound, occ.voxel_size,
                                    np.tile(origin_o, (len(cand), 1)), dirs, max_t=dist)
        hit_lin = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
        clear = ~hit | (hit_lin == target[cand])
        visible[cand[clear]] = True
    return visible.reshape(occ.dims)
