"""Command-line entry point: ``trimip {gen-data,train,render,eval,export-mesh}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save, stored_config_hash
from .config import RunConfig, desk_config
from .data import (DatasetError, Frame, compile_multiscale, load_blender_dataset, load_png,
                   save_png, write_blender_split)
from .evaluate import score_pairs, write_metrics, write_metrics_long
from .metrics import psnr
from .scenes import SCENES, generate_scene, oracle_render, orbit_cameras
from .surface import (default_delta_t, default_iso, extract_density_grid, marching_cubes,
                      render_image_hybrid, write_obj)
from .train import RayPool, TrainingError, init_state, render_state, train


class UsageError(Exception):
    pass


def _parse_scales(text):
    try:
        factors = sorted({int(s) for s in text.split(",") if s.strip()})
    except ValueError as exc:
        raise UsageError(f"bad --scales {text!r}") from exc
    if not factors or factors[0] != 1 or any(f & (f - 1) for f in factors):
        raise UsageError("--scales must be powers of two including 1, e.g. 1,2,4,8")
    return tuple(factors)


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        base = RunConfig.load(args.config).to_dict()
    else:
        base = desk_config().to_dict()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            base[key] = json.loads(value)
        except json.JSONDecodeError:
            base[key] = value
    if getattr(args, "ablate_no_mipmap", False):
        base["mipmap"] = False
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        base["threads"] = args.threads
    return RunConfig.from_dict(base)


def cmd_gen_data(args):
    scene = generate_scene(args.spec, args.seed)
    factors = _parse_scales(args.scales)
    res = args.res
    if res % max(factors):
        raise UsageError(f"--res {res} must be divisible by {max(factors)}")
    os.makedirs(args.out, exist_ok=True)
    splits = {"train": (args.n_train, 0.0, args.seed),
              "val": (args.n_val, 0.25, args.seed + 1),
              "test": (args.n_test, 0.5, args.seed + 2)}
    for split, (n, offset, seed) in splits.items():
        if n == 0:
            continue
        cams = orbit_cameras(scene, n, res, seed=seed, offset=offset)
        frames = [Frame(c, oracle_render(scene, c, args.spp, seed=seed * 100003 + k), 1.0,
                        f"r_{k}") for k, c in enumerate(cams)]
        frames = compile_multiscale(frames, factors)
        angle = 2.0 * np.arctan(0.5 * res / cams[0].fx)
        write_blender_split(args.out, split, frames, angle, scene.aabb,
                            {"scene": scene.name, "background": list(scene.background)})
        print(f"{split}: {len(frames)} frames at scales {', '.join(f'1/{f}' for f in factors)}")
    return 0


def _read_val(data, scales=False):
    try:
        return load_blender_dataset(data, "val", scales=scales).frames
    except DatasetError:
        return []


def cmd_train(args):
    run = _load_config(args)
    cfg = run.train
    ds = load_blender_dataset(args.data, "train")
    os.makedirs(args.out, exist_ok=True)
    if args.resume:
        state = checkpoint_load(args.resume, cfg)
        if stored_config_hash(args.resume) != cfg.digest():
            raise CheckpointError("checkpoint was written with a different config")
        mode = "a"
    else:
        state = init_state(cfg, ds.aabb)
        mode = "w"
    if not np.allclose(state.aabb.to_list(), ds.aabb.to_list()):
        raise DatasetError("dataset AABB differs from the checkpoint's")
    pool = RayPool.from_dataset(ds, cfg.background)
    val = _read_val(args.data)
    threads = run.resolved_threads()
    steps = args.steps if args.steps is not None else None
    t0 = time.time()
    with open(os.path.join(args.out, "train.log"), mode) as log:

        def on_step(st, stats):
            if st.step % run.eval_every == 0 or st.step == cfg.total_steps:
                msg = f"step {st.step}: loss {stats['loss']:.5f} ({time.time() - t0:.0f}s)"
                if val:
                    p = np.mean([psnr(render_state(st, f.camera, threads=threads)[..., :3],
                                      f.over(cfg.background)) for f in val])
                    msg += f", val psnr {p:.2f}"
                print(msg, flush=True)

        def write(line):
            log.write(line + "\n")

        train(state, pool, steps, log=write, callback=on_step)
    path = os.path.join(args.out, "checkpoint.bin")
    checkpoint_save(state, path)
    if val:
        p = np.mean([psnr(render_state(state, f.camera, threads=threads)[..., :3],
                          f.over(cfg.background)) for f in val])
        print(f"final val psnr {p:.3f}")
    print(f"checkpoint written to {path} (step {state.step})")
    return 0


def _hybrid_setup(state, run: RunConfig):
    iso = run.iso if run.iso is not None else default_iso(state.step_size)
    grid = extract_density_grid(state.enc, state.params, run.mesh_resolution)
    mesh = marching_cubes(grid, iso)
    delta_t = run.delta_t if run.delta_t is not None else default_delta_t(state.step_size, state.enc)
    return mesh, delta_t


def _render(state, run, frame, mesh=None, delta_t=None, threads=1):
    if mesh is not None:
        return render_image_hybrid(frame.camera, mesh, state.enc, state.params, delta_t,
                                   run.hybrid_n, state.config.background, return_stats=True)
    return render_state(state, frame.camera, early_stop=run.early_stop, threads=threads,
                        return_stats=True)


def _frames(args):
    ds = load_blender_dataset(args.data, args.split)
    if args.scale is not None:
        return [f for f in ds.frames if f.scale == 1.0 / args.scale]
    return ds.frames


def cmd_render(args):
    run = _load_config(args)
    state = checkpoint_load(args.checkpoint)
    run.train = state.config
    frames = _frames(args)
    os.makedirs(args.out, exist_ok=True)
    mesh = delta_t = None
    if args.hybrid:
        mesh, delta_t = _hybrid_setup(state, run)
        print(f"proxy mesh: {len(mesh)} triangles")
    threads = run.resolved_threads()
    evals = []
    for fr in frames:
        img, stats = _render(state, run, fr, mesh, delta_t, threads)
        # colour is already composited over the background
        save_png(os.path.join(args.out, fr.name + ".png"), img[..., :3])
        depth = stats["depth"]
        lo, hi = float(depth.min()), float(depth.max())
        norm = (depth - lo) / (hi - lo) if hi > lo else np.zeros_like(depth)
        save_png(os.path.join(args.out, fr.name + "_depth.png"), norm)
        with open(os.path.join(args.out, fr.name + "_depth.json"), "w") as fh:
            json.dump({"min": lo, "max": hi}, fh)
        evals.append(float(stats["n_evals"].mean()))
    print(f"rendered {len(frames)} views, {np.mean(evals):.2f} field evaluations per pixel")
    return 0


def cmd_eval(args):
    ds = load_blender_dataset(args.data, args.split)
    frames = ds.frames if args.scale is None else [f for f in ds.frames
                                                   if f.scale == 1.0 / args.scale]
    pairs = []
    if args.renders:
        for fr in frames:
            path = os.path.join(args.renders, fr.name + ".png")
            if not os.path.exists(path):
                raise DatasetError(f"missing render {path}")
            img = load_png(path)
            if img.ndim != 3 or img.shape[2] != 3:
                raise DatasetError(f"{path}: expected an RGB render")
            pairs.append((fr.scale, img, fr.over(ds.meta.get("background", (1, 1, 1)))))
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --renders")
        run = _load_config(args)
        if args.config and stored_config_hash(args.checkpoint) != run.train.digest():
            raise CheckpointError("checkpoint config hash does not match --config")
        state = checkpoint_load(args.checkpoint)
        run.train = state.config
        if not np.allclose(state.aabb.to_list(), ds.aabb.to_list()):
            raise DatasetError("dataset AABB differs from the checkpoint's")
        mesh = delta_t = None
        if args.hybrid:
            mesh, delta_t = _hybrid_setup(state, run)
        threads = run.resolved_threads()
        for fr in frames:
            img, _ = _render(state, run, fr, mesh, delta_t, threads)
            pairs.append((fr.scale, img[..., :3], fr.over(state.config.background)))
    if not pairs:
        raise DatasetError("no ground-truth frames to evaluate")
    scores = score_pairs(pairs)
    scene = ds.meta.get("scene", os.path.basename(os.path.normpath(args.data)))
    out = args.out
    write_metrics(out, scene, scores)
    write_metrics_long(os.path.splitext(out)[0] + "_long.csv", scene, scores)
    for k, (p, s) in scores.items():
        label = "avg" if k == "avg" else f"1/{int(round(1 / k))}"
        print(f"{label:>4}: psnr {p:.3f}  ssim {s:.4f}")
    return 0


def cmd_export_mesh(args):
    state = checkpoint_load(args.checkpoint)
    iso = args.iso if args.iso is not None else default_iso(state.step_size)
    grid = extract_density_grid(state.enc, state.params, args.resolution)
    mesh = marching_cubes(grid, iso)
    if len(mesh) == 0:
        print(f"warning: empty mesh (iso {iso:g} not crossed; density range "
              f"{grid.values.min():g} .. {grid.values.max():g})", file=sys.stderr)
    write_obj(args.out, mesh)
    print(f"{len(mesh.vertices)} vertices, {len(mesh)} triangles -> {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="trimip", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render an analytic scene into a multi-scale dataset")
    g.add_argument("--spec", required=True, choices=SCENES)
    g.add_argument("--out", required=True)
    g.add_argument("--spp", type=int, default=64)
    g.add_argument("--scales", default="1,2,4,8")
    g.add_argument("--res", type=int, default=128)
    g.add_argument("--n-train", type=int, default=16)
    g.add_argument("--n-val", type=int, default=2)
    g.add_argument("--n-test", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    def config_args(q):
        q.add_argument("--config", help="JSON run config (defaults to the desk recipe)")
        q.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config value (JSON literal)")
        q.add_argument("--threads", type=int,
                       help="worker threads (default: all cores; TRIMIP_THREADS overrides)")

    t = sub.add_parser("train", help="optimise a field on a dataset")
    config_args(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--steps", type=int, help="stop after this many more steps")
    t.add_argument("--ablate-no-mipmap", action="store_true",
                   help="single-level planes (every query point-sampled)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a dataset split from a checkpoint")
    config_args(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--scale", type=int, choices=(1, 2, 4, 8))
    r.add_argument("--out", required=True)
    r.add_argument("--hybrid", action="store_true", help="sample only near the proxy surface")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="per-scale PSNR/SSIM against ground truth")
    config_args(e)
    e.add_argument("--checkpoint")
    e.add_argument("--renders", help="evaluate PNGs in this directory instead of rendering")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--scale", type=int, choices=(1, 2, 4, 8))
    e.add_argument("--out", default="metrics.csv")
    e.add_argument("--hybrid", action="store_true")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("export-mesh", help="marching-cubes mesh of the density field as OBJ")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--resolution", type=int, default=128)
    m.add_argument("--iso", type=float)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_export_mesh)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"trimip: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, CheckpointError, DatasetError, TrainingError) as exc:
        print(f"trimip: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
