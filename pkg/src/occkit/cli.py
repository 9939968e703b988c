"""occkit command line: gen | run | eval | gradcheck | plot | oracle."""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import PipelineConfig
from .errors import OccKitError
from .gradcheck import run_gradcheck
from .heads import predict_labels
from .gridfile import header_mismatch, read_grid, write_grid
from .metrics import OccupancyGrid
from .parallel import env_threads, set_threads
from .plot import render_slice, write_ppm
from .scenegen import Scene, camera_visibility_mask, generate_scene, rasterize_gt, simulate_lidar
from .sweeps import raycast_sweep, sparse_conv_sweep
from .voxel import read_points, write_points

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


class UsageError(OccKitError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, names, extra: dict) -> Path:
    files = {n: _sha256(out / n) for n in sorted(names)}
    path = out / "manifest.json"
    path.write_text(_dumps({**extra, "files": files}))
    return path


def _save_npy(path: Path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
    path.write_bytes(buf.getvalue())


def load_config(path) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


# --- commands ----------------------------------------------------------------

def cmd_gen(cfg: PipelineConfig, out_dir) -> dict:
    """Synthesize a scene: scene.json, points.bin, gt.grid (with camera mask), manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rig = cfg.rig()
    scene = generate_scene(cfg.seed, cfg.scene_spec)
    cloud = simulate_lidar(scene, rig)
    gt = rasterize_gt(scene, cfg.occ_spec, cfg.num_classes)
    gt = OccupancyGrid(gt.spec, gt.labels, camera_visibility_mask(gt, rig), gt.num_classes, gt.free_class)

    (out / "scene.json").write_text(_dumps({"scene": scene.to_dict(), "rig": rig.to_dict(),
                                            "config": cfg.to_dict()}))
    write_points(out / "points.bin", cloud)
    write_grid(out / "gt.grid", gt)
    names = ["scene.json", "points.bin", "gt.grid"]
    write_manifest(out, names, {"command": "gen", "seed": cfg.seed, "points": int(len(cloud))})
    return {"out": str(out), "boxes": len(scene.boxes), "points": int(len(cloud)),
            "visible_fraction": float(gt.mask.mean())}


def visible_gt(gt_full: OccupancyGrid, use_mask: bool) -> OccupancyGrid:
    return gt_full if use_mask else OccupancyGrid(gt_full.spec, gt_full.labels, None,
                                                  gt_full.num_classes, gt_full.free_class)


def cmd_run(cfg: PipelineConfig, scene_dir, out_dir, fit: bool = False, detach_det: bool = False,
            use_mask: bool = False) -> dict:
    """Full forward on a generated scene; writes report.json, tensors/*.npy, pred.grid, manifest.json."""
    src, out = Path(scene_dir), Path(out_dir)
    meta = json.loads((src / "scene.json").read_text())
    scene = Scene.from_dict(meta["scene"])
    cloud = read_points(src / "points.bin")
    gt_file = read_grid(src / "gt.grid")
    if use_mask:
        cfg = cfg.with_overrides(use_camera_mask=True)
    gt = OccupancyGrid(cfg.occ_spec, gt_file.labels.astype(np.int64), gt_file.mask,
                       cfg.num_classes, cfg.free_class)
    mismatch = header_mismatch(gt, gt_file)
    if mismatch:
        raise UsageError(f"{src / 'gt.grid'}: header field {mismatch!r} disagrees with the config")

    rig = cfg.rig()
    weights = pipeline.NetworkWeights.from_config(cfg)
    res = pipeline.forward(cfg, scene, cloud, gt, rig, weights, detach_det=detach_det)
    losses = res.losses
    w = cfg.loss_weights
    report = {
        "seed": cfg.seed,
        "detach_det": detach_det,
        "use_mask": use_mask,
        "shapes": res.shapes(),
        "expected_shapes": pipeline.expected_shapes(cfg),
        "alignment": pipeline.alignment_report(cfg),
        "losses": losses,
        "loss_weights": {"lam": w.lam, "lam_l": w.lam_l},
        "num_objects": res.num_objects,
        "supervised_voxels": int(res.mask.sum()),
        "points": int(len(cloud)),
    }
    eval_gt = visible_gt(gt, use_mask)
    if fit:
        fr, pred, _ = pipeline.fit_and_predict(cfg, res, gt)
        report["fit"] = {"steps": cfg.fit_steps, "lr": cfg.fit_lr, "ce_initial": fr.losses[0],
                         "ce_final": fr.losses[-1], "ce_reduction": 1.0 - fr.losses[-1] / fr.losses[0],
                         "feature_scale": fr.scale}
        report["metrics"] = pipeline.evaluate_grids(cfg, pred, eval_gt, use_mask)
        report["metrics_zero_init"] = pipeline.evaluate_grids(cfg, pipeline.zero_prediction(gt), eval_gt, use_mask)
    else:
        pred = OccupancyGrid(gt.spec, predict_labels(res.tensors["logits"]), None, cfg.num_classes, cfg.free_class)

    out.mkdir(parents=True, exist_ok=True)
    (out / "tensors").mkdir(exist_ok=True)
    names = []
    for key in sorted(res.tensors):
        name = f"tensors/{key}.npy"
        _save_npy(out / name, res.tensors[key])
        names.append(name)
    write_grid(out / "pred.grid", pred)
    (out / "report.json").write_text(_dumps(report))
    names += ["pred.grid", "report.json"]
    write_manifest(out, names, {"command": "run", "seed": cfg.seed})
    return report


def parse_rays(text: str):
    try:
        a, e = (int(v) for v in text.lower().replace("×", "x").split("x"))
    except ValueError:
        raise UsageError(f"--rays expects AxE, got {text!r}") from None
    if a < 1 or e < 1:
        raise UsageError("--rays counts must be >= 1")
    return a, e


def cmd_eval(cfg: PipelineConfig, pred_path, gt_path, use_mask: bool = False, rays: str | None = None) -> dict:
    pred, gt = read_grid(pred_path), read_grid(gt_path)
    mismatch = header_mismatch(pred, gt)
    if mismatch:
        raise UsageError(f"grid headers differ in field {mismatch!r}")
    a, e = parse_rays(rays) if rays else (cfg.ray_azimuths, cfg.ray_elevations)
    cfg = cfg.with_overrides(num_classes=gt.num_classes)
    pred = OccupancyGrid(gt.spec, pred.labels.astype(np.int64), None, gt.num_classes, cfg.free_class)
    gt = visible_gt(OccupancyGrid(gt.spec, gt.labels.astype(np.int64), gt.mask, gt.num_classes, cfg.free_class),
                    use_mask)
    return pipeline.evaluate_grids(cfg, pred, gt, use_mask, a, e)


def cmd_plot(grid_path, z_slice: int, out_path) -> dict:
    grid = read_grid(grid_path)
    img = render_slice(grid.labels, z_slice)
    write_ppm(out_path, img)
    return {"out": str(out_path), "width": int(img.shape[1]), "height": int(img.shape[0])}


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="occkit", description=__doc__)
    p.add_argument("--config", help="JSON config file (defaults to the desk profile)")
    p.add_argument("--threads", type=int, default=None, help="worker cap (fallback: OCCKIT_THREADS)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="synthesize a scene")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="forward pass, losses and optional head fit")
    r.add_argument("--scene", required=True, help="directory written by gen")
    r.add_argument("--out", required=True)
    r.add_argument("--fit", action="store_true", help="fit the occupancy head and report metrics")
    r.add_argument("--detach-det", action="store_true", help="skip the auxiliary detection branch")
    r.add_argument("--use-mask", action="store_true", help="supervise and evaluate on camera-visible voxels")

    e = sub.add_parser("eval", help="metrics between two grid files")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("--use-mask", action="store_true")
    e.add_argument("--rays", help="ray lattice AxE, e.g. 180x8")
    e.add_argument("--out", help="also write the metrics JSON here")

    c = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--corrupt", choices=["ce", "focal", "l1", "head_backprop"],
                   help="negative control: perturb one analytic gradient")

    pl = sub.add_parser("plot", help="render one height slice as binary PPM")
    pl.add_argument("grid")
    pl.add_argument("--z", type=int, required=True)
    pl.add_argument("--out", required=True)

    o = sub.add_parser("oracle", help="sparse-conv and ray-cast oracle sweeps")
    o.add_argument("--seed", type=int, default=0)
    return p


def _run(args) -> int:
    cfg = load_config(args.config)
    if args.command == "gen":
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        print(_dumps(cmd_gen(cfg, args.out)), end="")
    elif args.command == "run":
        rep = cmd_run(cfg, args.scene, args.out, args.fit, args.detach_det, args.use_mask)
        print(_dumps({"shapes": rep["shapes"], "losses": rep["losses"],
                      **({"metrics": rep["metrics"]} if "metrics" in rep else {})}), end="")
    elif args.command == "eval":
        metrics = cmd_eval(cfg, args.pred, args.gt, args.use_mask, args.rays)
        text = _dumps(metrics)
        if args.out:
            Path(args.out).write_text(text)
        print(text, end="")
    elif args.command == "gradcheck":
        rows = run_gradcheck(args.seed, args.instances, args.corrupt)
        for row in rows:
            print(f"{row.name:<14s} instances={row.instances:<3d} max_rel_err={row.max_rel_error:.3e} "
                  f"{'PASS' if row.passed else 'FAIL'}")
        return EXIT_OK if all(r.passed for r in rows) else EXIT_CONTRACT
    elif args.command == "plot":
        print(_dumps(cmd_plot(args.grid, args.z, args.out)), end="")
    elif args.command == "oracle":
        results = sparse_conv_sweep(args.seed) + [raycast_sweep(args.seed)]
        for r in results:
            print(f"{r.name:<26s} cases={r.cases:<5d} failures={r.failures} worst={r.worst:.6g} "
                  f"{'PASS' if r.passed else 'FAIL'}")
        return EXIT_OK if all(r.passed for r in results) else EXIT_CONTRACT
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = args.threads if args.threads is not None else env_threads()
        with set_threads(threads):
            return _run(args)
    except OccKitError as e:
        print(f"occkit: error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as e:
        where = f" ({e.filename})" if getattr(e, "filename", None) else ""
        print(f"occkit: I/O error{where}: {e.strerror or e}", file=sys.stderr)
        return EXIT_IO
