"""Command-line entry points.

Subcommands mirror the experiment pipeline: ``gen-data`` writes a synthetic
sequence, ``train`` runs one of the three experiment modes, ``render``
produces per-view radiance/accumulation/depth/normal maps, ``export`` writes
the filtered point cloud and a marching-cubes mesh, ``eval`` writes the
metrics report JSON.

Configuration: every flag may also be given in a ``key = value`` text file
passed with ``--config`` (one pair per line, ``#`` comments).  Explicit
flags win over the file, the file wins over defaults.  The fully resolved
configuration is written into every output directory.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def parse_config_file(path: str) -> dict:
    """Read a ``key = value`` file into a string dict."""
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _merge(args: argparse.Namespace, parser_defaults: dict) -> dict:
    """defaults <- config file <- explicit flags, all as one flat dict."""
    resolved = dict(parser_defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        file_vals = parse_config_file(cfg_path)
        unknown = set(file_vals) - set(parser_defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for k, v in file_vals.items():
            d = parser_defaults[k]
            typ = type(d) if d is not None else str
            resolved[k] = typ(v) if typ is not bool else v.lower() in ("1", "true", "yes")
    for k in parser_defaults:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            resolved[k] = v
    return resolved


def _write_resolved(out_dir: str, resolved: dict):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as fh:
        for k in sorted(resolved):
            fh.write(f"{k} = {resolved[k]}\n")


# --- gen-data ----------------------------------------------------------------

_GEN_DEFAULTS = {
    "views": 54, "val": 6, "size": 64, "seed": 0, "supersample": 2,
    "sun-offset-deg": 0.0, "tone-map-m": 2.0, "turns": 1.05,
}


def cmd_gen_data(args) -> int:
    from .synthdata import GenConfig, generate_sequence

    resolved = _merge(args, _GEN_DEFAULTS)
    cfg = GenConfig(out_dir=args.out, n_views=resolved["views"],
                    n_val=resolved["val"], size=resolved["size"],
                    seed=resolved["seed"], supersample=resolved["supersample"],
                    sun_offset_deg=resolved["sun-offset-deg"],
                    tone_map_m=resolved["tone-map-m"], turns=resolved["turns"])
    generate_sequence(cfg)
    _write_resolved(args.out, resolved)
    print(f"dataset written to {args.out}")
    return 0


# --- train ---------------------------------------------------------------------

_TRAIN_DEFAULTS = {
    "steps": 6000, "batch": 512, "seed": 0, "dtype": "float32",
    "lr-hash": 1e-2, "lr-mlp": 1e-3, "lr-pose": 5e-3,
    "perturb-mean": 0.0, "perturb-std": 0.0, "perturb-seed": 0,
    "schedule-steps": 2000, "init-views": 8, "init-steps": 2000,
    "steps-per-view": 60, "n-coarse": 64, "n-fine": 64,
    "lambda-opacity": 1e-2, "lambda-radiance": 1e-4,
    "lambda-distortion": 2e-2, "lambda-pose-l1": 1e-4,
    "checkpoint-every": 2000,
}


def build_train_config(mode: str, resolved: dict):
    from .encoders import ScheduleConfig
    from .losses import LossWeights
    from .pose import IncrementalSchedule
    from .renderer import RenderConfig
    from .trainer import TrainConfig

    return TrainConfig(
        mode=mode,
        total_steps=resolved["steps"], batch_rays=resolved["batch"],
        seed=resolved["seed"], dtype=resolved["dtype"],
        lr_hash=resolved["lr-hash"], lr_mlp=resolved["lr-mlp"],
        lr_pose=resolved["lr-pose"],
        perturb_mean_deg=resolved["perturb-mean"],
        perturb_std_deg=resolved["perturb-std"],
        perturb_seed=resolved["perturb-seed"],
        checkpoint_every=resolved["checkpoint-every"],
        schedule=ScheduleConfig(total_schedule_steps=resolved["schedule-steps"]),
        incremental=IncrementalSchedule(init_views=resolved["init-views"],
                                        init_steps=resolved["init-steps"],
                                        steps_per_new_view=resolved["steps-per-view"]),
        render=RenderConfig(n_coarse=resolved["n-coarse"],
                            n_fine=resolved["n-fine"]),
        loss_weights=LossWeights(lambda_opacity=resolved["lambda-opacity"],
                                 lambda_radiance=resolved["lambda-radiance"],
                                 lambda_distortion=resolved["lambda-distortion"],
                                 lambda_pose_l1=resolved["lambda-pose-l1"]))


def cmd_train(args) -> int:
    from .synthdata import load_manifest
    from .trainer import train

    resolved = _merge(args, _TRAIN_DEFAULTS)
    manifest = load_manifest(args.data)
    if args.mode in ("baseline", "indep") and not manifest.has_ground_truth:
        raise ValueError(f"mode {args.mode} requires ground-truth rotations "
                         "in the manifest")
    config = build_train_config(args.mode, resolved)
    _write_resolved(args.out, dict(resolved, mode=args.mode, data=args.data))
    result = train(config, manifest, args.out)
    print(f"run complete: train PSNR {result.final_psnr_train:.2f} dB, "
          f"median pose error {result.final_median_pose_error:.3f} deg")
    return 0


# --- render / export / eval -------------------------------------------------

def _load_run(run_dir: str):
    from .trainer import load_run

    ckpt = os.path.join(run_dir, "checkpoint.bin")
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    return load_run(ckpt)


_RENDER_DEFAULTS = {"views": "val", "n-coarse": 64, "n-fine": 64, "seed": 0}


def cmd_render(args) -> int:
    from . import export_metrics as em
    from .renderer import (RenderConfig, render_full_image, render_normal_map,
                           write_pgm16, write_ppm16)
    from .synthdata import load_manifest

    resolved = _merge(args, _RENDER_DEFAULTS)
    manifest = load_manifest(args.data)
    params, model, meta = _load_run(args.run)
    rcfg = RenderConfig(n_coarse=resolved["n-coarse"], n_fine=resolved["n-fine"])
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(args.out, resolved)

    which = resolved["views"]
    train_set = list(manifest.indices("train"))
    if which == "val":
        selected = list(manifest.indices("val"))
    elif which == "train":
        selected = train_set
    elif which == "all":
        selected = list(range(len(manifest.paths)))
    else:
        raise ValueError(f"--views must be val|train|all, got {which!r}")

    level_w = np.ones(params.cfg.grid.levels)
    for i in selected:
        rng = np.random.default_rng(resolved["seed"])
        if i in train_set:
            local = train_set.index(i)
            pose_i = model.camera_pose(local)
            app = local
        else:
            pose_i = em.val_pose(model, manifest, int(i))
            app = em.nearest_train_appearance(manifest, manifest.times[i])
        maps = render_full_image(params, level_w, rcfg, manifest.intrinsics,
                                 pose_i, manifest.near, manifest.far, app, rng)
        write_pgm16(os.path.join(args.out, f"{i:04d}_radiance.pgm"),
                    maps["radiance"])
        write_pgm16(os.path.join(args.out, f"{i:04d}_acc.pgm"), maps["acc"])
        write_pgm16(os.path.join(args.out, f"{i:04d}_depth.pgm"),
                    maps["depth"] / manifest.far)
        normals = render_normal_map(params, level_w, manifest.intrinsics, pose_i,
                                    maps["depth"], maps["acc"])
        write_ppm16(os.path.join(args.out, f"{i:04d}_normal.ppm"),
                    (normals + 1.0) / 2.0 * (maps["acc"] > 0.5)[..., None])
    print(f"rendered {len(selected)} views to {args.out}")
    return 0


_EXPORT_DEFAULTS = {"acc-threshold": 0.5, "outlier-k": 16, "outlier-std": 2.0,
                    "grid-res": 128, "density-threshold": 0.0,
                    "n-coarse": 64, "n-fine": 64, "seed": 0}


def cmd_export(args) -> int:
    from . import export_metrics as em
    from . import plyio
    from .renderer import RenderConfig
    from .synthdata import load_manifest

    resolved = _merge(args, _EXPORT_DEFAULTS)
    manifest = load_manifest(args.data)
    params, model, meta = _load_run(args.run)
    rcfg = RenderConfig(n_coarse=resolved["n-coarse"], n_fine=resolved["n-fine"])
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(args.out, resolved)

    cloud = em.export_point_cloud(params, model, manifest, rcfg,
                                  acc_threshold=resolved["acc-threshold"],
                                  seed=resolved["seed"],
                                  outlier_k=resolved["outlier-k"],
                                  outlier_std=resolved["outlier-std"])
    gt_path = os.path.join(args.data, "gt_cloud.ply")
    err = None
    if os.path.exists(gt_path):
        gt_cloud, _ = plyio.read_ply_points(gt_path)
        err = em.nearest_distances(cloud, gt_cloud) * manifest.scene_to_meters
    plyio.write_ply_points(os.path.join(args.out, "cloud.ply"), cloud, err)

    thr = resolved["density-threshold"] or em.default_density_threshold(manifest, rcfg)
    level_w = np.ones(params.cfg.grid.levels)
    mesh = em.marching_cubes(em.density_grid_fn(params, level_w),
                             resolved["grid-res"], thr)
    plyio.write_ply_mesh(os.path.join(args.out, "mesh.ply"),
                         mesh.vertices, mesh.triangles)
    print(f"cloud ({len(cloud)} pts) and mesh ({len(mesh.triangles)} tris) "
          f"written to {args.out}")
    return 0


_EVAL_DEFAULTS = {"n-coarse": 64, "n-fine": 64, "seed": 0}


def cmd_eval(args) -> int:
    from . import export_metrics as em
    from . import plyio
    from .renderer import RenderConfig
    from .synthdata import load_manifest

    resolved = _merge(args, _EVAL_DEFAULTS)
    manifest = load_manifest(args.data)
    params, model, meta = _load_run(args.run)
    rcfg = RenderConfig(n_coarse=resolved["n-coarse"], n_fine=resolved["n-fine"])
    gt_cloud, _ = plyio.read_ply_points(os.path.join(args.data, "gt_cloud.ply"))
    report, _ = em.evaluate_run(params, model, manifest, rcfg, gt_cloud,
                                seed=resolved["seed"])
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


# --- parser -------------------------------------------------------------------

def _add_overridables(sub, defaults):
    sub.add_argument("--config", help="key = value config file")
    for key, d in defaults.items():
        typ = type(d)
        if typ is bool:
            sub.add_argument(f"--{key}", type=str, default=None)
        else:
            sub.add_argument(f"--{key}", type=typ if d is not None else str,
                             default=None,
                             help=f"default {d}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spinrecon",
                description="joint 3D reconstruction and attitude estimation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    _add_overridables(g, _GEN_DEFAULTS)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one experiment")
    t.add_argument("--mode", required=True, choices=["baseline", "indep", "global"])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_overridables(t, _TRAIN_DEFAULTS)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render maps from a checkpoint")
    r.add_argument("--run", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    _add_overridables(r, _RENDER_DEFAULTS)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("export", help="export point cloud and mesh")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    _add_overridables(e, _EXPORT_DEFAULTS)
    e.set_defaults(fn=cmd_export)

    v = sub.add_parser("eval", help="write the metrics report")
    v.add_argument("--run", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True, help="report JSON path")
    _add_overridables(v, _EVAL_DEFAULTS)
    v.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except Exception as e:  # runtime failure
        sys.stderr.write(f"runtime failure: {type(e).__name__}: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
