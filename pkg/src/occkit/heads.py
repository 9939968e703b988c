"""Auxiliary detection targets, all training losses with analytic gradients,
and a gradient-descent fit of the occupancy head."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .bevfuse import height_to_channel, occ_logits
from .errors import ContractError, DivergenceError
from .layers import conv1x1

REG_CHANNELS = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
SIGMOID_CLAMP = 1e-6


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple  # (l, w, h); l along the yaw direction
    yaw: float
    cls: int

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ContractError(f"box size must be positive, got {self.size}")

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw, "cls": self.cls}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(tuple(d["center"]), tuple(d["size"]), float(d["yaw"]), int(d["cls"]))


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("focal exponents must be non-negative")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.01     # detection branch weight
    lam_l: float = 0.25   # localisation weight inside the detection loss

    def __post_init__(self):
        if self.lam < 0 or self.lam_l < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class DetectionTargets:
    heatmap: np.ndarray     # (K_det, H', W')
    regression: np.ndarray  # (8, H', W')
    mask: np.ndarray        # (H', W') bool

    @property
    def num_objects(self) -> int:
        return int(self.mask.sum())


# --- targets -----------------------------------------------------------------

def gaussian_radius(det_size, min_overlap: float = 0.1) -> float:
    """CornerNet radius such that a shifted box keeps ``min_overlap`` IoU."""
    height, width = det_size
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2
    a2, b2 = 4, 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3, b3 = 4 * min_overlap, -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def gaussian_kernel(radius: int, sigma: float | None = None) -> np.ndarray:
    """(2r+1, 2r+1) kernel peaking at exactly 1; sigma defaults to (2r+1)/6."""
    if sigma is None:
        sigma = (2 * radius + 1) / 6.0
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    k[radius, radius] = 1.0
    return k


def _center_cell(box: Box3D, bev):
    cs = bev.cell_size
    fx = (box.center[0] - bev.min_xy[0]) / cs[0]
    fy = (box.center[1] - bev.min_xy[1]) / cs[1]
    _, h, w = bev.shape
    ix, iy = math.floor(fx), math.floor(fy)
    if not (0 <= ix < w and 0 <= iy < h):
        return None
    return ix, iy, fx - ix, fy - iy


def draw_gaussian(heatmap: np.ndarray, ix: int, iy: int, radius: int, sigma: float | None = None) -> None:
    """Elementwise-max splat of a Gaussian centred on cell (iy, ix), in place."""
    k = gaussian_kernel(radius, sigma)
    h, w = heatmap.shape
    y0, y1 = max(0, iy - radius), min(h, iy + radius + 1)
    x0, x1 = max(0, ix - radius), min(w, ix + radius + 1)
    patch = k[y0 - iy + radius:y1 - iy + radius, x0 - ix + radius:x1 - ix + radius]
    np.maximum(heatmap[y0:y1, x0:x1], patch, out=heatmap[y0:y1, x0:x1])


def heatmap_targets(boxes, bev, k_det: int, min_overlap: float = 0.1, min_radius: int = 2) -> np.ndarray:
    """Per-class Gaussian heatmaps over the BEV grid of ``bev`` (any object with
    ``shape``, ``min_xy`` and ``cell_size``). Boxes whose centre falls outside are skipped."""
    _, h, w = bev.shape
    hm = np.zeros((k_det, h, w))
    cs = bev.cell_size
    for box in boxes:
        if not 0 <= box.cls < k_det:
            raise ContractError(f"box class {box.cls} outside [0, {k_det})")
        cell = _center_cell(box, bev)
        if cell is None:
            continue
        r = gaussian_radius((box.size[0] / cs[0], box.size[1] / cs[1]), min_overlap)
        draw_gaussian(hm[box.cls], cell[0], cell[1], max(min_radius, int(r)))
    return hm


def regression_targets(boxes, bev):
    """(8, H', W') regression maps and the (H', W') object-centre mask."""
    _, h, w = bev.shape
    reg = np.zeros((REG_CHANNELS, h, w))
    mask = np.zeros((h, w), dtype=bool)
    for box in boxes:
        cell = _center_cell(box, bev)
        if cell is None:
            continue
        ix, iy, ox, oy = cell
        if mask[iy, ix]:
            warnings.warn(f"two objects share BEV cell ({iy}, {ix}); keeping the later one", stacklevel=2)
        l, wd, ht = box.size
        reg[:, iy, ix] = [ox, oy, box.center[2], math.log(l), math.log(wd), math.log(ht),
                          math.sin(box.yaw), math.cos(box.yaw)]
        mask[iy, ix] = True
    return reg, mask


def build_targets(boxes, bev, k_det: int) -> DetectionTargets:
    reg, mask = regression_targets(boxes, bev)
    return DetectionTargets(heatmap_targets(boxes, bev, k_det), reg, mask)


# --- losses ------------------------------------------------------------------

def sigmoid_clamped(x: np.ndarray):
    """Sigmoid clamped to [1e-6, 1 - 1e-6]; returns (p, dp/dx)."""
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    clipped = (p < SIGMOID_CLAMP) | (p > 1.0 - SIGMOID_CLAMP)
    p = np.clip(p, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    return p, np.where(clipped, 0.0, p * (1.0 - p))


def focal_loss(hm: np.ndarray, target: np.ndarray, params: FocalParams = FocalParams(), n: int | None = None):
    """Gaussian-heatmap focal loss and its gradient with respect to ``hm``.

    ``n`` defaults to the number of cells whose target equals exactly 1.
    """
    p = np.asarray(hm, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError("heatmap prediction and target shapes differ")
    pos = t == 1.0
    if n is None:
        n = int(pos.sum())
    if n == 0:
        return 0.0, np.zeros_like(p)
    if np.any((p <= 0) | (p >= 1)):
        raise ContractError("focal loss needs predictions strictly inside (0, 1)")
    a, b = params.alpha, params.beta
    logp, log1p = np.log(p), np.log1p(-p)
    neg_w = (1.0 - t) ** b
    term = np.where(pos, (1 - p) ** a * logp, neg_w * p ** a * log1p)
    d_pos = -a * (1 - p) ** (a - 1) * logp + (1 - p) ** a / p if a else 1.0 / p
    d_neg = neg_w * ((a * p ** (a - 1) * log1p if a else 0.0) - p ** a / (1 - p))
    grad = -np.where(pos, d_pos, d_neg) / n
    return float(-term.sum() / n), grad


def l1_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Sum of |pred - target| over all regression channels at masked cells,
    divided by the number of masked cells (objects)."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[1:] != mask.shape:
        raise ContractError("regression prediction, target and mask shapes disagree")
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = (pred - target) * mask[None]
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def log_softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def ce_loss(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None):
    """Mean voxel cross-entropy over masked voxels.

    Args:
        logits: (K, Z, X, Y).
        labels: (Z, X, Y) integer classes.
        mask: (Z, X, Y) bool, all voxels when None.
    """
    k = logits.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[1:]:
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape[1:]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError("labels outside [0, K)")
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    m = int(mask.sum())
    if m == 0:
        return 0.0, np.zeros_like(logits, dtype=np.float64)
    lsm = log_softmax(logits, axis=0)
    picked = np.take_along_axis(lsm, labels[None].astype(np.int64), axis=0)[0]
    loss = float(-picked[mask].sum() / m)
    grad = np.exp(lsm)
    np.put_along_axis(grad, labels[None].astype(np.int64),
                      np.take_along_axis(grad, labels[None].astype(np.int64), axis=0) - 1.0, axis=0)
    grad *= mask[None] / m
    return loss, grad


def det_loss(cls_loss: float, loc_loss: float, w: LossWeights = LossWeights()) -> float:
    return cls_loss + w.lam_l * loc_loss


def total_loss(ce: float, det: float, w: LossWeights = LossWeights()) -> float:
    return ce + w.lam * det


def _exact_ratio(ratio: float) -> Fraction:
    return Fraction(ratio).limit_denominator(10 ** 9)


def empty_voxel_dropout(labels: np.ndarray, free_class: int = 0, ratio: float = 0.8, seed: int = 0) -> np.ndarray:
    """Supervision mask dropping exactly floor(ratio * E) of the E free voxels."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"dropout ratio {ratio} outside [0, 1]")
    labels = np.asarray(labels)
    mask = np.ones(labels.shape, dtype=bool)
    free = np.flatnonzero(labels.reshape(-1) == free_class)
    n_drop = math.floor(_exact_ratio(ratio) * len(free))
    drop = np.random.default_rng(seed).permutation(free)[:n_drop]
    mask.reshape(-1)[drop] = False
    return mask


# --- heads -------------------------------------------------------------------

def head_forward(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Single bias-free 1x1 conv head."""
    return conv1x1(features, weights)


def head_backprop(upstream: np.ndarray, weights: np.ndarray, features: np.ndarray):
    """Backward pass of a 1x1 conv head.

    Args:
        upstream: (C_out, ...) gradient at the head output.
        weights: (C_out, C_in).
        features: (C_in, ...) head input.

    Returns:
        (grad_features, grad_weights).
    """
    c_out = upstream.shape[0]
    g = upstream.reshape(c_out, -1)
    x = features.reshape(features.shape[0], -1)
    w = weights.reshape(c_out, -1)
    return (w.T @ g).reshape(features.shape), (g @ x.T).reshape(weights.shape)


def occ_head_loss(f_occ, weights, labels, mask, k: int, z: int):
    """CE of the occupancy head; returns (loss, dL/dweights, dL/df_occ)."""
    logits = occ_logits(f_occ, weights, k, z)
    loss, g = ce_loss(logits, labels, mask)
    gf, gw = head_backprop(height_to_channel(g), weights, f_occ)
    return loss, gw, gf


@dataclass
class FitResult:
    weights: np.ndarray  # (K * Z, C) in raw feature units
    losses: list
    scale: float


def fit_last_layer(f_occ: np.ndarray, labels: np.ndarray, mask: np.ndarray, k: int, z: int,
                   steps: int = 200, lr: float = 1.0) -> FitResult:
    """Gradient descent on the occupancy head from zero initialisation.

    Features are divided by the RMS feature-vector norm over all XY cells
    before fitting; returned weights are rescaled to apply to raw features.
    ``losses[i]`` is the CE before step ``i``; the final entry follows the last step.
    """
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    c = f_occ.shape[0]
    with np.errstate(over="ignore"):
        norms2 = (f_occ.reshape(c, -1) ** 2).sum(axis=0)
    if not np.all(np.isfinite(norms2)):
        raise ContractError("features must be finite with a finite norm")
    scale = float(np.sqrt(norms2.mean())) if norms2.mean() > 0 else 1.0
    x = f_occ / scale
    w = np.zeros((k * z, c))
    losses = []
    for step in range(steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, gw, _ = occ_head_loss(x, w, labels, mask, k, z)
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        losses.append(loss)
        if step < steps:
            w = w - lr * gw
    return FitResult(w / scale, losses, scale)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax class per voxel, returned in grid layout (X, Y, Z)."""
    return np.argmax(logits, axis=0).transpose(1, 2, 0)


def zxy(arr: np.ndarray) -> np.ndarray:
    """Grid layout (X, Y, Z) -> logits layout (Z, X, Y)."""
    return np.asarray(arr).transpose(2, 0, 1)

