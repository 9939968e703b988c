"""Binary PPM rendering of occupancy slices."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractError

# Occ3D / nuScenes class colours, keyed by name.
NUSCENES_COLORS = {
    "others": (0, 0, 0), "barrier": (255, 120, 50), "bicycle": (255, 192, 203), "bus": (255, 255, 0),
    "car": (0, 150, 245), "construction_vehicle": (0, 255, 255), "motorcycle": (200, 180, 0),
    "pedestrian": (255, 0, 0), "traffic_cone": (255, 240, 150), "trailer": (135, 60, 0),
    "truck": (160, 32, 240), "driveable_surface": (255, 0, 255), "other_flat": (139, 137, 137),
    "sidewalk": (75, 0, 75), "terrain": (150, 240, 80), "manmade": (230, 230, 250),
    "vegetation": (0, 175, 0),
}

# desk taxonomy: free, ground, vehicle, pedestrian, barrier, vegetation
DEFAULT_PALETTE = (
    (0, 0, 0),
    NUSCENES_COLORS["driveable_surface"],
    NUSCENES_COLORS["car"],
    NUSCENES_COLORS["pedestrian"],
    NUSCENES_COLORS["barrier"],
    NUSCENES_COLORS["vegetation"],
)


def render_slice(labels: np.ndarray, z: int, palette=DEFAULT_PALETTE, free_class: int = 0) -> np.ndarray:
    """(Y_o, X_o, 3) uint8 image of height slice ``z``; row y, column x."""
    nx, ny, nz = labels.shape
    if not 0 <= z < nz:
        raise ContractError(f"z slice {z} outside [0, {nz})")
    sl = labels[:, :, z]
    if sl.size and sl.max() >= len(palette):
        raise ContractError(f"class id {int(sl.max())} has no palette colour")
    lut = np.asarray(palette, dtype=np.uint8)
    img = lut[sl].transpose(1, 0, 2).copy()
    img[(sl == free_class).T] = 0
    return img


def encode_ppm(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def decode_ppm(raw: bytes) -> np.ndarray:
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ContractError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
