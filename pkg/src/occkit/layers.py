"""Dense building blocks: seeded weight init, 2-D convolution, bilinear resize.

All tensors are float64 ``numpy`` arrays in channel-first layout.
"""
from __future__ import annotations

import zlib

import numpy as np

from .errors import ContractError


def weight_stream(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream per (seed, layer name)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def init_weight(seed: int, name: str, shape) -> np.ndarray:
    """Uniform in [-a, a] with a = fan_in ** -0.5 (fan_in = prod(shape[1:]))."""
    fan_in = int(np.prod(shape[1:]))
    a = fan_in ** -0.5
    return weight_stream(seed, name).uniform(-a, a, size=shape)


def relu(x: np.ndarray, enabled: bool = True) -> np.ndarray:
    return np.maximum(x, 0.0) if enabled else x


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Bias-free 2-D convolution with zero 'same' padding (k // 2).

    Args:
        x: (C_in, H, W).
        w: (C_out, C_in, k, k) with odd k.
    """
    c_in, h, wd = x.shape
    c_out, wc, k, k2 = w.shape
    if wc != c_in:
        raise ContractError(f"conv2d channel mismatch: input {c_in}, kernel {wc}")
    if k != k2 or k % 2 == 0:
        raise ContractError("conv2d kernel must be square with odd size")
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    cols = np.empty((c_in, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    out = w.reshape(c_out, -1) @ cols.reshape(c_in * k * k, ho * wo)
    return out.reshape(c_out, ho, wo)


def conv1x1(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pointwise convolution; ``w`` is (C_out, C_in) or (C_out, C_in, 1, 1)."""
    w2 = w.reshape(w.shape[0], -1)
    if w2.shape[1] != x.shape[0]:
        raise ContractError(f"1x1 conv channel mismatch: input {x.shape[0]}, kernel {w2.shape[1]}")
    return (w2 @ x.reshape(x.shape[0], -1)).reshape((w2.shape[0],) + x.shape[1:])


def _linear_taps(n_out: int, n_in: int):
    # half-pixel source coordinates, clamped to the valid centre range
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def upsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear resize by an integer factor using cell-centre alignment."""
    c, h, w = x.shape
    y0, y1, fy = _linear_taps(h * factor, h)
    x0, x1, fx = _linear_taps(w * factor, w)
    rows = x[:, y0, :] * (1 - fy)[None, :, None] + x[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
