"""GridFile: one JSON header line followed by raw uint8 labels and optional mask bytes.

Labels are stored in the linear order (x * Y_o + y) * Z_o + z.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .bevfuse import OccGridSpec
from .errors import ContractError
from .metrics import OccupancyGrid

HEADER_FIELDS = ("dims", "voxel_size", "origin", "class_count", "has_mask")


def grid_header(grid: OccupancyGrid) -> dict:
    return {"dims": list(grid.spec.dims), "voxel_size": list(grid.spec.voxel_size),
            "origin": list(grid.spec.min_bound), "class_count": grid.num_classes,
            "has_mask": grid.mask is not None}


def encode_grid(grid: OccupancyGrid) -> bytes:
    if grid.num_classes > 256:
        raise ContractError("GridFile stores labels as uint8; at most 256 classes")
    header = json.dumps(grid_header(grid), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = grid.labels.astype(np.uint8).tobytes(order="C")
    if grid.mask is not None:
        body += grid.mask.astype(np.uint8).tobytes(order="C")
    return header + b"\n" + body


def decode_grid(raw: bytes, source: str = "<bytes>") -> OccupancyGrid:
    nl = raw.find(b"\n")
    if nl < 0:
        raise ContractError(f"{source}: missing GridFile header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContractError(f"{source}: malformed GridFile header ({e})") from e
    missing = [f for f in HEADER_FIELDS if f not in header]
    if missing:
        raise ContractError(f"{source}: header lacks {missing}")
    dims = tuple(int(d) for d in header["dims"])
    n = int(np.prod(dims))
    body = raw[nl + 1:]
    expected = n * (2 if header["has_mask"] else 1)
    if len(body) != expected:
        raise ContractError(f"{source}: payload is {len(body)} bytes, expected {expected}")
    labels = np.frombuffer(body[:n], dtype=np.uint8).reshape(dims)
    mask = np.frombuffer(body[n:], dtype=np.uint8).reshape(dims).astype(bool) if header["has_mask"] else None
    origin = np.asarray(header["origin"], float)
    vs = np.asarray(header["voxel_size"], float)
    spec = OccGridSpec(tuple(origin), tuple(origin + vs * np.array(dims)), tuple(vs))
    return OccupancyGrid(spec, labels, mask, int(header["class_count"]))


def write_grid(path, grid: OccupancyGrid) -> None:
    Path(path).write_bytes(encode_grid(grid))


def read_grid(path) -> OccupancyGrid:
    return decode_grid(Path(path).read_bytes(), str(path))


def header_mismatch(a: OccupancyGrid, b: OccupancyGrid) -> str | None:
    """Name of the first header field that differs, or None."""
    ha, hb = grid_header(a), grid_header(b)
    for f in ("dims", "voxel_size", "origin", "class_count"):
        va, vb = ha[f], hb[f]
        if isinstance(va, list):
            if len(va) != len(vb) or not np.allclose(va, vb, rtol=0, atol=1e-9):
                return f
        elif va != vb:
            return f
    return None
