"""Command-line driver: synth, train, render, eval-depth, fuse, eval-mesh, intersect-bench.

Exit codes: 0 on success, 1 on usage errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import io as rio
from .errors import RayletError
from .features import FeatureLayout, PerPointFeatures
from .field import BLEND_MODES, RayletFieldModel, TrainConfig, train
from .fusion import TsdfVolume, extract_mesh, integrate
from .metrics import MESH_COLUMNS, RAY_COLUMNS, RAY_HEADERS, format_table, mesh_metrics, ray_metrics, scale_align
from .render import render_distance, render_normals
from .sampling import SceneModel, build_tile_index
from .scene import Camera, GaussianSet, PointCloud
from .synth import PRESETS, AnalyticScene, make_gaussians, orbit_cameras, render_oracle_views, sample_points

log = logging.getLogger("raylet_field")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

RUN_CONFIG = "run_config.json"
WEIGHTS_FILE = "weights.rldfw"
FEATURES_FILE = "features.rldff"
LOSS_FILE = "loss.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- datasets and checkpoints


def load_scene(path) -> SceneModel:
    obj = rio.read_ply(path)
    if isinstance(obj, GaussianSet):
        return SceneModel.from_gaussians(obj)
    return SceneModel.from_point_cloud(obj)


def load_views(data_dir, split: str = "train"):
    """``(name, camera, depth_map)`` triples of one split listed in the dataset manifest."""
    data_dir = Path(data_dir)
    manifest = rio.read_json(data_dir / "manifest.json")
    if not isinstance(manifest, dict) or not isinstance(manifest.get("views"), list):
        raise rio.ParseError("manifest needs a 'views' list", 0)
    out = []
    for v in manifest["views"]:
        if split != "all" and v.get("split") != split:
            continue
        cam = rio.read_camera(data_dir / v["camera"])
        depth = rio.read_pfm(data_dir / v["depth"])
        out.append((v["name"], cam, depth))
    return out


def save_checkpoint(out_dir, model: RayletFieldModel, trace, run_config: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rio.write_weights(out_dir / WEIGHTS_FILE, model.mlp, model.layout, model.blend_mode)
    if model.layout.C:
        rio.write_embeddings(out_dir / FEATURES_FILE, model.features.values)
    rio.write_loss_csv(out_dir / LOSS_FILE, trace)
    rio.write_json(out_dir / RUN_CONFIG, run_config)


def load_checkpoint(ckpt_dir, scene: Optional[SceneModel] = None, dtype=np.float32):
    """Rebuild a trained model; the scene defaults to the one recorded in the run config."""
    ckpt_dir = Path(ckpt_dir)
    run = rio.read_json(ckpt_dir / RUN_CONFIG)
    cfg = TrainConfig(**run["train"])
    header, mlp = rio.read_weights(ckpt_dir / WEIGHTS_FILE)
    if (header.in_dim, header.K, header.C, header.blend) != (cfg.layout.in_dim, cfg.K, cfg.C, cfg.blend):
        raise rio.ParseError("weights header disagrees with the run config", 0)
    if scene is None:
        scene = load_scene(Path(run["data"]) / "scene.ply")
    if cfg.C:
        feats = rio.read_embeddings(ckpt_dir / FEATURES_FILE)
    else:
        feats = PerPointFeatures.none(len(scene))
    feats = PerPointFeatures("loaded", feats.values.astype(dtype), False)
    return RayletFieldModel(mlp.astype(dtype), cfg.layout, feats, cfg.blend_config, scene), cfg, run


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, conf):
    out = Path(args.out)
    (out / "cameras").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    scene = PRESETS[args.scene]()
    if args.encoding == "gaussians":
        geom = make_gaussians(scene, args.points, seed=args.seed)
    else:
        geom = sample_points(scene, args.points, seed=args.seed)
    rio.write_ply(out / "scene.ply", geom)
    rio.write_json(out / "analytic.json", scene.to_dict())
    res = (args.width, args.height)
    splits = {
        "train": orbit_cameras(scene, args.train_views, args.orbit_radius, res, seed=args.seed),
        "test": orbit_cameras(scene, args.test_views, args.orbit_radius, res, seed=args.seed + 100, azimuth0=17.0),
    }
    views = []
    for split, cams in splits.items():
        for i, (cam, depth) in enumerate(zip(cams, render_oracle_views(scene, cams))):
            name = f"{split}_{i:03d}"
            rio.write_camera(out / "cameras" / f"{name}.json", cam)
            rio.write_pfm(out / "depth" / f"{name}.pfm", depth)
            views.append({"name": name, "split": split, "camera": f"cameras/{name}.json", "depth": f"depth/{name}.pfm"})
    rio.write_json(out / "manifest.json", {"scene": "scene.ply", "encoding": args.encoding, "views": views})
    rio.write_json(out / RUN_CONFIG, {"command": "synth", **_plain(vars(args))})
    print(f"wrote {len(views)} views and {args.points} {args.encoding} to {out}")
    return EXIT_OK


_TRAIN_FLAGS = {
    "steps": "max_steps", "epochs": "epochs", "batch_rays": "batch_rays", "lr": "lr", "K": "K", "C": "C",
    "T_train": "T_train", "T_test": "T_test", "blend": "blend", "hidden": "hidden", "layers": "layers",
    "feature_mode": "feature_mode", "neighbors": "neighbors", "tile_px": "tile_px", "pe_freqs": "pe_freqs",
}


def train_config_from(args, conf: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    base = conf.get("train", conf)
    kw = {k: v for k, v in base.items() if k in known}
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    kw["seed"] = args.seed
    return TrainConfig(**kw)


def cmd_train(args, conf):
    cfg = train_config_from(args, conf)
    scene = load_scene(Path(args.data) / "scene.ply")
    views = [(cam, depth) for _, cam, depth in load_views(args.data, "train")]
    if not views:
        raise RayletError("dataset has no training views")
    t0 = time.perf_counter()
    every = max(1, args.log_every)
    res = train(scene, views, cfg, callback=lambda s, l: log.info("step %d loss %.5f", s, l) if s % every == 0 else None)
    run = {"command": "train", "data": str(Path(args.data).resolve()), "seed": args.seed, "train": cfg.to_dict()}
    save_checkpoint(args.out, res.model, res.loss_trace, run)
    print(f"trained {len(res.loss_trace)} steps in {time.perf_counter() - t0:.1f}s; final loss {res.loss_trace[-1][1]:.5f}")
    return EXIT_OK


def _f64_model(model: RayletFieldModel) -> RayletFieldModel:
    feats = PerPointFeatures(model.features.mode, model.features.values.astype(np.float64), False)
    return RayletFieldModel(model.mlp.astype(np.float64), model.layout, feats, model.blend, model.scene)


def cmd_render(args, conf):
    scene = load_scene(args.scene) if args.scene else None
    model, cfg, run = load_checkpoint(args.checkpoint, scene)
    T = args.T_test or cfg.T_test
    if args.camera:
        targets = [(Path(p).stem, rio.read_camera(p)) for p in args.camera]
    else:
        targets = [(n, c) for n, c, _ in load_views(args.data or run["data"], args.split)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fine = _f64_model(model) if args.normals else None
    for name, cam in targets:
        tiles = build_tile_index(cam, model.scene, cfg.tile_px)
        cand = tiles.pixel_candidates(T)
        depth = render_distance(model.scene, model, cam, T, cfg.tile_px, cand)
        rio.write_pfm(out / f"{name}_depth.pfm", depth)
        rio.write_pgm16(out / f"{name}_depth.pgm", depth)
        if fine is not None:
            rio.write_pfm(out / f"{name}_normal.pfm", render_normals(model.scene, fine, cam, T, cfg.tile_px, candidates=cand))
    rio.write_json(out / RUN_CONFIG, {"command": "render", **_plain(vars(args)), "T_test": T, "checkpoint_run": run})
    print(f"rendered {len(targets)} views to {out}")
    return EXIT_OK


def _pair_values(pred_path, gt_path, align):
    pred, gt = rio.read_pfm(pred_path), rio.read_pfm(gt_path)
    if not hasattr(pred, "values") or not hasattr(gt, "values"):
        raise RayletError("eval-depth expects single-channel PFM maps")
    if pred.values.shape != gt.values.shape:
        raise RayletError(f"{pred_path} and {gt_path} differ in size")
    m = pred.valid & gt.valid
    p, g = pred.values[m], gt.values[m]
    if align == "median-mad":
        p = scale_align(p, g)
    return p, g


def cmd_eval_depth(args, conf):
    if len(args.pred) != len(args.gt):
        raise UsageError("--pred and --gt need the same number of files")
    rows, all_p, all_g = [], [], []
    for pp, gp in zip(args.pred, args.gt):
        p, g = _pair_values(pp, gp, args.align)
        rows.append([Path(pp).name] + ray_metrics(p, g).row())
        all_p.append(p)
        all_g.append(g)
    if len(rows) > 1:
        rows.append(["all"] + ray_metrics(np.concatenate(all_p), np.concatenate(all_g)).row())
    headers = ("file",) + RAY_COLUMNS
    if args.out:
        rio.write_csv(args.out, headers, rows)
    print(format_table(("file",) + RAY_HEADERS, rows))
    return EXIT_OK


def cmd_fuse(args, conf):
    if args.data:
        views = [(c, d) for _, c, d in load_views(args.data, args.split)]
    else:
        if not args.depth or len(args.depth) != len(args.camera or []):
            raise UsageError("give --data, or matching --depth and --camera lists")
        views = [(rio.read_camera(c), rio.read_pfm(d)) for d, c in zip(args.depth, args.camera)]
    if not views:
        raise RayletError("no views to fuse")
    trunc = args.trunc or 4.0 * args.voxel
    if args.bounds:
        lo, hi = np.array(args.bounds[:3]), np.array(args.bounds[3:])
    else:
        pts = []
        for cam, depth in views:
            o, d = cam.pixel_rays()
            D = depth.values.reshape(-1)
            ok = depth.valid.reshape(-1)
            pts.append(o[ok] + D[ok, None] * d[ok])
        pts = np.concatenate(pts)
        if len(pts) == 0:
            raise RayletError("no valid depth pixels to fuse")
        lo, hi = pts.min(axis=0) - 2 * trunc, pts.max(axis=0) + 2 * trunc
    if np.any(hi <= lo):
        raise UsageError("bounds must have hi > lo")
    vol = TsdfVolume.from_bounds(lo, hi, args.voxel, trunc)
    if np.prod(vol.dims) > 400_000_000:
        raise UsageError(f"volume {vol.dims} is too large; raise --voxel")
    for cam, depth in views:
        integrate(vol, depth, cam)
    if args.volume:
        rio.write_volume(args.volume, vol)
    mesh = extract_mesh(vol)
    rio.write_mesh(args.out, mesh)
    print(f"fused {len(views)} views into {vol.dims} voxels; mesh has {len(mesh.vertices)} vertices, {len(mesh)} triangles")
    return EXIT_OK


def cmd_eval_mesh(args, conf):
    pred, gt = rio.read_mesh(args.pred), rio.read_mesh(args.gt)
    m = mesh_metrics(pred, gt, args.samples, args.threshold, args.seed)
    if args.out:
        rio.write_csv(args.out, MESH_COLUMNS, [m.row()])
    print(format_table(MESH_COLUMNS, [m.row()]))
    return EXIT_OK


def cmd_intersect_bench(args, conf):
    rng = np.random.default_rng(args.seed)
    mismatches = 0
    t_tile = t_exh = 0.0
    W, H = args.width, args.height
    for s in range(args.scenes):
        pts = rng.uniform(-2, 2, (args.points, 3))
        if args.encoding == "gaussians":
            n = args.points
            geom = GaussianSet(pts, rng.uniform(0.01, 0.1, (n, 3)), rng.normal(size=(n, 4)), rng.uniform(0.05, 1.0, n))
            scene = SceneModel.from_gaussians(geom)
        else:
            scene = SceneModel.from_point_cloud(PointCloud(pts))
        cam = Camera.look_at(rng.uniform(-4, 4, 3), rng.uniform(-1, 1, 3), 0.8 * W, 0.8 * W, W, H)
        uv = np.stack([rng.uniform(0, W, args.rays), rng.uniform(0, H, args.rays)], axis=1)
        d = cam.directions(uv)
        o = np.broadcast_to(cam.center, d.shape)
        t0 = time.perf_counter()
        exh = scene.candidates_multi(o, d, args.T)
        t1 = time.perf_counter()
        tiles = build_tile_index(cam, scene, args.tile_px)
        for T in args.T:
            got = tiles.candidates(uv, T, d)
            if not (np.array_equal(got.index, exh[T].index) and np.array_equal(got.key, exh[T].key)):
                mismatches += 1
                log.warning("scene %d, T=%d: tile route differs from exhaustive scan", s, T)
        t2 = time.perf_counter()
        t_exh += t1 - t0
        t_tile += t2 - t1
    total_rays = args.scenes * args.rays
    rows = [
        ["exhaustive", total_rays / t_exh, t_exh],
        ["tile", total_rays * len(args.T) / t_tile, t_tile],
    ]
    print(format_table(("route", "rays/s", "seconds"), rows, "{:.2f}"))
    print(f"{args.scenes} scenes x {len(args.T)} T values: {mismatches} mismatches")
    return EXIT_OK if mismatches == 0 else EXIT_DATA


# ---------------------------------------------------------------- argument parsing


def _plain(d):
    return {k: (v if isinstance(v, (int, float, str, bool, type(None), list)) else str(v)) for k, v in d.items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global RNG seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread limit")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config providing defaults")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="raylet-field", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="emit an analytic scene with exact depth views")
    s.add_argument("--scene", choices=sorted(PRESETS), default="sphere_in_box")
    s.add_argument("--encoding", choices=("points", "gaussians"), default="points")
    s.add_argument("--points", type=int, default=10_000)
    s.add_argument("--train-views", type=int, default=30)
    s.add_argument("--test-views", type=int, default=5)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--orbit-radius", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="fit a field to a synthesized dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="stop after at most this many optimizer steps")
    t.add_argument("--epochs", type=int, help="passes over the training rays (default 1)")
    t.add_argument("--batch-rays", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--K", type=int)
    t.add_argument("--C", type=int)
    t.add_argument("--T-train", type=int)
    t.add_argument("--T-test", type=int)
    t.add_argument("--blend", choices=BLEND_MODES)
    t.add_argument("--hidden", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--feature-mode", choices=("none", "learnable"))
    t.add_argument("--neighbors", choices=("both", "xyz", "relative"))
    t.add_argument("--pe-freqs", type=int)
    t.add_argument("--tile-px", type=int)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render distance (and normal) maps")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", help="scene PLY (default: the training scene)")
    r.add_argument("--camera", nargs="+", help="camera JSON files (default: dataset views)")
    r.add_argument("--data", help="dataset directory (default: the training dataset)")
    r.add_argument("--split", default="test", choices=("train", "test", "all"))
    r.add_argument("--T-test", type=int)
    r.add_argument("--normals", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval-depth", parents=[common], help="ray-distance metrics between PFM maps")
    e.add_argument("--pred", nargs="+", required=True)
    e.add_argument("--gt", nargs="+", required=True)
    e.add_argument("--align", choices=("none", "median-mad"), default="none")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_depth)

    f = sub.add_parser("fuse", parents=[common], help="TSDF-fuse distance maps into a mesh")
    f.add_argument("--data")
    f.add_argument("--split", default="all", choices=("train", "test", "all"))
    f.add_argument("--depth", nargs="+")
    f.add_argument("--camera", nargs="+")
    f.add_argument("--voxel", type=float, default=0.02)
    f.add_argument("--trunc", type=float)
    f.add_argument("--bounds", type=float, nargs=6, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    f.add_argument("--volume", help="also write the TSDF volume")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    m = sub.add_parser("eval-mesh", parents=[common], help="surface metrics between two meshes")
    m.add_argument("--pred", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--samples", type=int, default=100_000)
    m.add_argument("--threshold", type=float, default=0.05)
    m.add_argument("--out")
    m.set_defaults(func=cmd_eval_mesh)

    b = sub.add_parser("intersect-bench", parents=[common], help="tile vs exhaustive candidate equivalence and speed")
    b.add_argument("--encoding", choices=("points", "gaussians"), default="points")
    b.add_argument("--points", type=int, default=10_000)
    b.add_argument("--rays", type=int, default=1000)
    b.add_argument("--scenes", type=int, default=3)
    b.add_argument("--T", type=int, nargs="+", default=[1, 5, 10, 20])
    b.add_argument("--width", type=int, default=160)
    b.add_argument("--height", type=int, default=120)
    b.add_argument("--tile-px", type=int, default=16)
    b.set_defaults(func=cmd_intersect_bench)
    return p


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.seed = getattr(args, "seed", 0)
        threads = getattr(args, "threads", None)
        if threads is not None and threads < 1:
            raise UsageError("--threads must be >= 1")
        conf = {}
        if getattr(args, "config", None):
            conf = rio.read_json(args.config)
            if not isinstance(conf, dict):
                raise UsageError("--config must hold a JSON object")
            if "seed" in conf and "--seed" not in (argv if argv is not None else sys.argv[1:]):
                args.seed = int(conf["seed"])
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit(threads):
            return args.func(args, conf)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (RayletError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
