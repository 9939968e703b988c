"""Rigid frames, pinhole projection and BEV coordinate normalisation.

Point sets are plain ``(N, 3)`` float64 arrays; order is always preserved.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

# Projections closer than this to the image plane are treated as invalid.
MIN_DEPTH = 1e-3


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Transform:
    """Rigid transform ``p' = R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ContractError("transform entries must be finite")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ContractError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Transform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ContractError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Transform":
        return cls(rot_z(yaw), np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Transform":
        rt = self.rotation.T
        return Transform(rt, -rt @ self.translation)

    def compose(self, other: "Transform") -> "Transform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Transform(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Transform") -> "Transform":
        return self.compose(other)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Transform":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def as_points(pts) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if p.shape[-1] != 3:
        raise ContractError(f"points must have 3 coordinates, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ContractError("points must be finite")
    return p


def apply_transform(t: Transform, pts) -> np.ndarray:
    p = as_points(pts)
    return p @ t.rotation.T + t.translation


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera over a feature plane.

    ``extrinsic`` maps the reference (LiDAR) frame into the camera frame, whose
    axes are x right, y down, z forward. Integer pixel coordinates address the
    centre of a feature cell.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    feature_width: int
    feature_height: int
    extrinsic: Transform = field(default_factory=Transform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if self.feature_width < 1 or self.feature_height < 1:
            raise ConfigError("feature plane must be at least 1x1")

    @property
    def origin(self) -> np.ndarray:
        """Camera centre in the reference frame."""
        return self.extrinsic.inverse().translation

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "feature_width": self.feature_width, "feature_height": self.feature_height,
                "extrinsic": self.extrinsic.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["feature_width"]),
                   int(d["feature_height"]), Transform.from_dict(d["extrinsic"]))


def project_points(cam: CameraModel, pts_ref):
    """Project reference-frame points onto the camera feature plane.

    Returns:
        (u, v, valid, z): pixel coordinates, validity flags and camera-frame
        depth. ``u``/``v`` are NaN where ``valid`` is false.
    """
    p = apply_transform(cam.extrinsic, pts_ref)
    z = p[:, 2]
    front = z > MIN_DEPTH
    safe_z = np.where(front, z, 1.0)
    u = cam.fx * p[:, 0] / safe_z + cam.cx
    v = cam.fy * p[:, 1] / safe_z + cam.cy
    valid = front & (u >= 0) & (u < cam.feature_width) & (v >= 0) & (v < cam.feature_height)
    u = np.where(valid, u, np.nan)
    v = np.where(valid, v, np.nan)
    return u, v, valid, z


def pixel_rays(cam: CameraModel):
    """Unit ray directions (reference frame) through every feature-cell centre.

    Returned in row-major (v, u) order together with the camera-frame z of each
    unit direction, so that ``t * z_per_unit`` converts range to depth.
    """
    vs, us = np.meshgrid(np.arange(cam.feature_height, dtype=np.float64),
                         np.arange(cam.feature_width, dtype=np.float64), indexing="ij")
    d_cam = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy,
                      np.ones_like(us)], axis=-1).reshape(-1, 3)
    norms = np.linalg.norm(d_cam, axis=1)
    d_cam /= norms[:, None]
    d_ref = d_cam @ cam.extrinsic.rotation  # R^T applied row-wise
    return d_ref, d_cam[:, 2]


def normalize_bev_coords(pts_xy, bev_min, bev_max):
    """Map metric XY coordinates linearly onto [-1, 1] over the BEV extent.

    Returns:
        (coords, in_range): normalised ``(N, 2)`` coordinates and a flag per
        point that is false when either coordinate falls outside [-1, 1].
    """
    p = np.asarray(pts_xy, dtype=np.float64)[..., :2]
    lo = np.asarray(bev_min, dtype=np.float64)
    hi = np.asarray(bev_max, dtype=np.float64)
    if np.any(hi <= lo):
        raise ConfigError(f"degenerate BEV extent {lo.tolist()} .. {hi.tolist()}")
    g = 2.0 * (p - lo) / (hi - lo) - 1.0
    in_range = np.all((g >= -1.0) & (g <= 1.0), axis=-1)
    return g, in_range
