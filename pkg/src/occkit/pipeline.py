"""End-to-end forward pass: encoders, lifting, fusion, BEV encoding, grid-sample
realignment, occupancy logits, auxiliary detection losses and optional head fitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import heads
from .bevfuse import (BevEncoder, BevTensor, bev_encode, bvre_plan, fuse_bev, height_compress,
                      height_to_channel, occ_logits, validate_alignment)
from .config import PipelineConfig
from .errors import ContractError
from .layers import init_weight
from .lift import lift_features
from .metrics import OccupancyGrid, default_rayset, miou, rayiou, voxel_iou
from .scenegen import Scene, SensorRig, render_camera_features
from .voxel import LidarEncoder, lidar_encode, voxelize


@dataclass
class NetworkWeights:
    lidar: LidarEncoder
    compress_cam: np.ndarray
    compress_lidar: np.ndarray
    fuse: np.ndarray
    bev: BevEncoder
    occ_head: np.ndarray
    hm_head: np.ndarray
    reg_head: np.ndarray

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "NetworkWeights":
        s = cfg.seed
        d = cfg.lidar_grid.dims[0] // 16
        z_o = cfg.occ_spec.dims[2]
        c_r = cfg.bev_channels
        return cls(
            lidar=LidarEncoder.from_seed(s, 4, cfg.lidar_channels),
            compress_cam=init_weight(s, "compress.cam", (cfg.camera_channels, cfg.camera_channels * cfg.lift_levels)),
            compress_lidar=init_weight(s, "compress.lidar", (cfg.lidar_channels, cfg.lidar_channels * d)),
            fuse=init_weight(s, "fuse", (cfg.fuse_channels, cfg.camera_channels + cfg.lidar_channels, 3, 3)),
            bev=BevEncoder.from_seed(s, cfg.fuse_channels, cfg.bev_widths, c_r),
            occ_head=init_weight(s, "head.occ", (cfg.num_classes * z_o, c_r)),
            hm_head=init_weight(s, "head.heatmap", (cfg.num_det_classes, c_r)),
            reg_head=init_weight(s, "head.regression", (heads.REG_CHANNELS, c_r)),
        )


@dataclass
class ForwardResult:
    tensors: dict
    losses: dict
    targets: heads.DetectionTargets | None
    num_objects: int
    mask: np.ndarray  # supervised voxels, (Z, X, Y)
    extras: dict = field(default_factory=dict)

    def shapes(self) -> dict:
        return {k: list(v.shape) for k, v in self.tensors.items()}


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ContractError as e:
        raise ContractError(f"stage {name}: {e}") from e


def expected_shapes(cfg: PipelineConfig) -> dict:
    d, h, w = cfg.lidar_grid.dims
    x_o, y_o, z_o = cfg.occ_spec.dims
    return {
        "F_l": [cfg.lidar_channels, d // 16, h // 8, w // 8],
        "F_c": [cfg.camera_channels, cfg.lift_levels, h // 8, w // 8],
        "F_f": [cfg.fuse_channels, h // 8, w // 8],
        "F_r": [cfg.bev_channels, h // 8, w // 8],
        "F_occ": [cfg.bev_channels, x_o, y_o],
        "logits": [cfg.num_classes, z_o, x_o, y_o],
    }


def supervision_mask(cfg: PipelineConfig, gt: OccupancyGrid) -> np.ndarray:
    """Camera visibility mask, or the empty-voxel dropout mask when it is disabled."""
    if cfg.use_camera_mask:
        if gt.mask is None:
            raise ContractError("use_camera_mask set but ground truth has no visibility mask")
        return heads.zxy(gt.mask)
    keep = heads.empty_voxel_dropout(gt.labels, cfg.free_class, cfg.dropout_ratio, cfg.seed)
    return heads.zxy(keep)


def forward(cfg: PipelineConfig, scene: Scene, cloud: np.ndarray, gt: OccupancyGrid,
            rig: SensorRig | None = None, weights: NetworkWeights | None = None,
            detach_det: bool = False) -> ForwardResult:
    rig = rig or cfg.rig()
    weights = weights or NetworkWeights.from_config(cfg)
    bev_min, bev_max = cfg.bev_extent

    vox = _stage("voxelize", voxelize, cloud, cfg.lidar_grid, cfg.max_points)
    f_l = _stage("lidar_encode", lidar_encode, vox, weights.lidar)
    cam_maps = _stage("camera_features", render_camera_features, scene, rig, cfg.camera_channels, cfg.num_classes)
    f_c = _stage("lift", lift_features, cam_maps, rig.cameras, cfg.lift_spec)
    bev_cam = _stage("compress_cam", height_compress, f_c, weights.compress_cam, bev_min, bev_max)
    bev_lidar = _stage("compress_lidar", height_compress, f_l, weights.compress_lidar, bev_min, bev_max)
    f_f = _stage("fuse", fuse_bev, bev_cam, bev_lidar, weights.fuse)
    f_r = _stage("bev_encode", bev_encode, f_f, weights.bev)
    occ = cfg.occ_spec
    plan = _stage("bvre", bvre_plan, f_r, occ)
    f_occ = plan.apply(f_r.data)
    z_o = occ.dims[2]
    logits = _stage("occ_head", occ_logits, f_occ, weights.occ_head, cfg.num_classes, z_o)

    tensors = {"F_l": f_l, "F_c": f_c, "F_f": f_f.data, "F_r": f_r.data, "F_occ": f_occ, "logits": logits}
    for name, shape in expected_shapes(cfg).items():
        if list(tensors[name].shape) != shape:
            raise ContractError(f"stage {name}: shape {list(tensors[name].shape)} != expected {shape}")

    labels = heads.zxy(gt.labels)
    mask = supervision_mask(cfg, gt)
    l_ce, g_logits = heads.ce_loss(logits, labels, mask)
    extras = {"plan": plan, "f_r": f_r, "g_logits": g_logits}
    w = cfg.loss_weights

    if detach_det:
        losses = {"L_ce": l_ce, "L_cls": 0.0, "L_loc": 0.0, "L_det": 0.0, "L_total": l_ce}
        return ForwardResult(tensors, losses, None, 0, mask, extras)

    targets = heads.build_targets(scene.boxes, f_r, cfg.num_det_classes)
    n_obj = sum(1 for b in scene.boxes if heads._center_cell(b, f_r) is not None)
    hm_logits = heads.head_forward(f_r.data, weights.hm_head)
    hm, dhm = heads.sigmoid_clamped(hm_logits)
    reg = heads.head_forward(f_r.data, weights.reg_head)
    l_cls, g_hm = heads.focal_loss(hm, targets.heatmap, cfg.focal, n_obj)
    l_loc, g_reg = heads.l1_loss(reg, targets.regression, targets.mask)
    l_det = heads.det_loss(l_cls, l_loc, w)
    losses = {"L_ce": l_ce, "L_cls": l_cls, "L_loc": l_loc, "L_det": l_det,
              "L_total": heads.total_loss(l_ce, l_det, w)}
    tensors["heatmap"] = hm
    tensors["regression"] = reg
    extras.update(g_hm_logits=g_hm * dhm, g_reg=g_reg)
    return ForwardResult(tensors, losses, targets, n_obj, mask, extras)


def feature_gradient(result: ForwardResult, weights: NetworkWeights, lam: float, lam_l: float) -> np.ndarray:
    """dL_total / dF_r through the occupancy head, the grid sample and the detection heads."""
    f_occ = result.tensors["F_occ"]
    g_occ, _ = heads.head_backprop(height_to_channel(result.extras["g_logits"]), weights.occ_head, f_occ)
    g_r = result.extras["plan"].adjoint(g_occ)
    if lam and "g_hm_logits" in result.extras:
        f_r = result.tensors["F_r"]
        g_cls, _ = heads.head_backprop(result.extras["g_hm_logits"], weights.hm_head, f_r)
        g_loc, _ = heads.head_backprop(result.extras["g_reg"], weights.reg_head, f_r)
        g_r = g_r + lam * (g_cls + lam_l * g_loc)
    return g_r


def evaluate_grids(cfg: PipelineConfig, pred: OccupancyGrid, gt: OccupancyGrid, use_mask: bool = False,
                   azimuths: int | None = None, elevations: int | None = None) -> dict:
    rays = default_rayset(gt.spec, azimuths or cfg.ray_azimuths, elevations or cfg.ray_elevations,
                          cfg.ray_origin, cfg.ray_elevation_band)
    m = miou(pred, gt, use_mask, cfg.num_classes)
    r = rayiou(pred, gt, rays, cfg.thresholds)
    return {
        "iou": voxel_iou(pred, gt, use_mask),
        "miou": m.mean,
        "per_class_iou": m.per_class,
        "rayiou": {f"{t:g}m": r.values[t] for t in r.thresholds},
        "rayiou_mean": r.mean,
        "rayiou_per_class": {f"{t:g}m": {str(c): v for c, v in r.per_class[t].items()} for t in r.thresholds},
    }


def fit_and_predict(cfg: PipelineConfig, result: ForwardResult, gt: OccupancyGrid):
    """Fit the occupancy head on F_occ; returns (FitResult, prediction grid, fitted logits)."""
    z_o = cfg.occ_spec.dims[2]
    fit = heads.fit_last_layer(result.tensors["F_occ"], heads.zxy(gt.labels), result.mask,
                               cfg.num_classes, z_o, cfg.fit_steps, cfg.fit_lr)
    logits = occ_logits(result.tensors["F_occ"], fit.weights, cfg.num_classes, z_o)
    pred = OccupancyGrid(gt.spec, heads.predict_labels(logits), None, cfg.num_classes, cfg.free_class)
    return fit, pred, logits


def alignment_report(cfg: PipelineConfig) -> dict:
    return validate_alignment(cfg.occ_spec, cfg.lidar_grid).to_dict()


def zero_prediction(gt: OccupancyGrid) -> OccupancyGrid:
    """What a zero-initialised head predicts: uniform logits, argmax = class 0 everywhere."""
    return OccupancyGrid(gt.spec, np.zeros_like(gt.labels), None, gt.num_classes, gt.free_class)


def bev_tensor(data, cfg: PipelineConfig) -> BevTensor:
    lo, hi = cfg.bev_extent
    return BevTensor(data, lo, hi)
