"""Command-line entry points: train, render, mesh, eval, gradcheck, synth.

Every command takes --seed for reproducibility and most accept --config, a
JSON file of TrainConfig / fusion fields; explicit flags win over the
file.  Exit codes: 0 success, 2 usage or configuration error, 3 runtime
failure.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import fusion, gaussians, rasterizer, scenes, trainer
from .gradcheck import run_gradcheck
from .losses import LossWeights
from .rasterizer import RasterConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

_FUSION_KEYS = {"voxel_size", "trunc", "depth_filter", "filter_angle_deg",
                "volume_padding"}


class ConfigError(ValueError):
    pass


def load_run_config(path, overrides):
    """TrainConfig + fusion settings from JSON, with CLI overrides on top.

    Unknown keys are rejected so typos fail loudly before any work starts.
    """
    train_fields = {f.name for f in dataclasses.fields(trainer.TrainConfig)}
    data = {}
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
    data.update({k: v for k, v in overrides.items() if v is not None})

    unknown = set(data) - train_fields - _FUSION_KEYS - {"weights", "raster"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    fusion_cfg = {k: data.pop(k) for k in list(data) if k in _FUSION_KEYS}
    if "weights" in data:
        data["weights"] = LossWeights(**data.pop("weights"))
    if "raster" in data:
        data["raster"] = RasterConfig(**data.pop("raster"))
    if "background" in data:
        data["background"] = tuple(data["background"])
    try:
        cfg = trainer.TrainConfig(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))
    fusion_cfg.setdefault("voxel_size", 0.02)
    fusion_cfg.setdefault("trunc", 5 * fusion_cfg["voxel_size"])
    fusion_cfg.setdefault("depth_filter", True)
    fusion_cfg.setdefault("filter_angle_deg", 80.0)
    fusion_cfg.setdefault("volume_padding", 0.1)
    return cfg, fusion_cfg


def _load_any_scene(args):
    if getattr(args, "synthetic", None):
        return scenes.make_synthetic(args.synthetic, n_views=args.views,
                                     resolution=args.resolution, seed=args.seed)
    if not args.scene:
        raise ConfigError("provide --scene PATH or --synthetic KIND")
    return scenes.load_scene(args.scene)


def cmd_train(args):
    cfg, _ = load_run_config(args.config, {
        "iterations": args.iterations, "seed": args.seed,
        "use_exposure": True if args.exposure else None,
    })
    scene = _load_any_scene(args)
    os.makedirs(args.out, exist_ok=True)
    state = trainer.train(scene, cfg, out_dir=args.out,
                          log_every=args.log_every)
    first = state.history[0]["total"]
    last = state.history[-1]["total"]
    print(f"trained {cfg.iterations} iterations: loss {first:.5f} -> {last:.5f}, "
          f"{len(state.cloud)} gaussians")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.ply')}")
    return EXIT_OK


def cmd_render(args):
    cloud = gaussians.load_ply(args.checkpoint)
    scene = _load_any_scene(args)
    ids = [c.image_id for c in scene.cameras]
    if args.view_id not in ids:
        print(f"error: view id {args.view_id} not in scene (have {ids})",
              file=sys.stderr)
        return EXIT_RUNTIME
    cam = scene.cameras[ids.index(args.view_id)]
    maps = rasterizer.render(cloud, cam)
    os.makedirs(args.out, exist_ok=True)
    base = os.path.join(args.out, f"view_{args.view_id:04d}")
    scenes.write_image(base + "_color.png", maps.color)
    scenes.write_float_map(base + "_depth.fmp", np.where(maps.depth_valid, maps.depth, 0.0))
    scenes.write_float_map(base + "_normal.fmp", maps.normal)
    scenes.write_float_map(base + "_distance.fmp", maps.distance)
    dmax = maps.depth.max()
    scenes.write_gray16(base + "_depth.png", maps.depth,
                        scale=60000.0 / dmax if dmax > 0 else 1.0)
    print(f"wrote {base}_color.png / _depth.fmp / _normal.fmp / _distance.fmp")
    return EXIT_OK


def cmd_mesh(args):
    cfg, fus = load_run_config(args.config, {
        "voxel_size": args.voxel_size, "trunc": args.trunc,
        "depth_filter": False if args.no_depth_filter else None,
    })
    cloud = gaussians.load_ply(args.checkpoint)
    if len(cloud) == 0:
        print("error: checkpoint contains no gaussians", file=sys.stderr)
        return EXIT_RUNTIME
    scene = _load_any_scene(args)

    lo = cloud.positions.min(axis=0) - fus["volume_padding"]
    hi = cloud.positions.max(axis=0) + fus["volume_padding"]
    volume = fusion.volume_for_bounds(lo, hi, fus["voxel_size"])
    any_valid = False
    for cam in scene.cameras:
        maps = rasterizer.render(cloud, cam, cfg.raster)
        valid = maps.depth_valid
        if fus["depth_filter"]:
            valid = fusion.filter_depth(maps.depth, valid, cam,
                                        max_angle_deg=fus["filter_angle_deg"],
                                        offset=cfg.sv_offset)
        any_valid |= bool(valid.any())
        fusion.integrate(volume, maps.depth, valid, cam, fus["trunc"])
    if not any_valid:
        print("error: no valid depth in any view; cannot fuse", file=sys.stderr)
        return EXIT_RUNTIME
    mesh = fusion.extract_mesh(volume)
    if len(mesh.triangles) == 0:
        print("error: TSDF volume has no zero crossing; mesh is empty",
              file=sys.stderr)
        return EXIT_RUNTIME
    fusion.save_mesh_ply(mesh, args.out)
    if args.volume_dump:
        fusion.save_volume(volume, args.volume_dump)
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles "
          f"-> {args.out}")
    return EXIT_OK


def cmd_eval(args):
    mesh = fusion.load_mesh_ply(args.mesh)
    ref = fusion.load_mesh_ply(args.reference)
    d = fusion.chamfer_distance(mesh, ref, n_samples=args.samples, seed=args.seed)
    report = {"mesh": args.mesh, "reference": args.reference,
              "chamfer": d, "samples": args.samples}
    print(f"chamfer distance: {d:.6g} (world units, {args.samples} samples/side)")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(report, f, indent=1)
    return EXIT_OK


def cmd_gradcheck(args):
    report = run_gradcheck(seed=args.seed, size=args.scene_size, tol=args.tol)
    ok = True
    for name, res in report.items():
        status = "pass" if res["passed"] else "FAIL"
        print(f"{name:12s} max rel err {res['max_rel_err']:.3e}  {status}")
        ok &= res["passed"]
    print("gradcheck:", "all classes passed" if ok else "FAILURES detected")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_synth(args):
    bundle = scenes.make_synthetic(
        args.kind, n_views=args.views, resolution=args.resolution,
        seed=args.seed,
        exposure_range=(args.exposure_a, args.exposure_b) if args.exposure_a else None)
    path = scenes.save_scene(bundle, args.out, with_ground_truth=args.ground_truth)
    print(f"wrote synthetic scene: {path}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="planesplat",
                                description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("PLANESPLAT_THREADS", "1")),
                   help="worker cap for parallel sections (desk build runs 1)")
    sub = p.add_subparsers(dest="command", required=True)

    def add_scene_args(sp):
        sp.add_argument("--scene", help="scene.json manifest or COLMAP text dir")
        sp.add_argument("--synthetic", choices=list(scenes._SURFACES),
                        help="generate a synthetic scene instead of loading")
        sp.add_argument("--views", type=int, default=20)
        sp.add_argument("--resolution", type=int, default=64)

    t = sub.add_parser("train", help="optimize a gaussian cloud")
    add_scene_args(t)
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--exposure", action="store_true")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render maps from a checkpoint")
    add_scene_args(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--view-id", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_render)

    m = sub.add_parser("mesh", help="fuse depths and extract a mesh")
    add_scene_args(m)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--config")
    m.add_argument("--out", required=True)
    m.add_argument("--voxel-size", type=float, dest="voxel_size")
    m.add_argument("--trunc", type=float)
    m.add_argument("--no-depth-filter", action="store_true")
    m.add_argument("--volume-dump")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_mesh)

    e = sub.add_parser("eval", help="chamfer distance between two meshes")
    e.add_argument("--mesh", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--samples", type=int, default=100000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--json", help="also write a JSON report")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="verify analytic gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scene-size", type=int, default=16)
    g.add_argument("--tol", type=float, default=1e-3)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="emit a synthetic scene to disk")
    s.add_argument("kind", choices=list(scenes._SURFACES))
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--exposure-a", type=float, default=0.0)
    s.add_argument("--exposure-b", type=float, default=0.0)
    s.add_argument("--ground-truth", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors already
        raise
    try:
        return args.func(args)
    except (ConfigError, IOError) as e:
        # bad inputs: missing/malformed files or config
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
