"""Command-line surface: train, render, eval, bake and info subcommands.

Dataset arguments accept either a transforms-JSON directory or the built-in
``synthetic:<name>`` scheme (checker-plane, plane-sphere), which generates a
posed dataset on the fly so nothing needs downloading.  Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import sceneio, synth
from .geometry import anisotropy_stats
from .metrics import psnr, ssim
from .renderer import RenderOptions, render
from .training import TrainConfig, train


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker cap for parallel operations")


def _add_dataset_flags(p):
    p.add_argument("--scene", required=True,
                   help="dataset directory or synthetic:<name>")
    p.add_argument("--views", type=int, default=20,
                   help="synthetic train view count")
    p.add_argument("--test-views", type=int, default=4)
    p.add_argument("--res", type=int, default=64, help="synthetic resolution")
    p.add_argument("--checker-tiles", type=int, default=6)


def _resolve_dataset(args):
    if args.scene.startswith("synthetic:"):
        name = args.scene.split(":", 1)[1]
        ds, _ = synth.synthetic_dataset(
            name, n_train=args.views, n_test=args.test_views,
            width=args.res, height=args.res, tiles=args.checker_tiles,
            seed=args.seed)
        return ds
    return sceneio.load_dataset(args.scene)


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="texsplat",
        description="Surfel splatting with a global hash-grid texture field")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimize a scene against a dataset")
    _add_dataset_flags(t)
    _add_common(t)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--profile", choices=["desk", "full"], default="desk")
    t.add_argument("--iters", type=int, default=None,
                   help="total iterations, split 1:2 between the stages")
    t.add_argument("--stage1-iters", type=int, default=None)
    t.add_argument("--stage2-iters", type=int, default=None)
    t.add_argument("--init-surfels", type=int, default=None)
    t.add_argument("--max-surfels", type=int, default=None)
    t.add_argument("--densify-every", type=int, default=None)
    t.add_argument("--eval-every", type=int, default=None)
    t.add_argument("--background", choices=["black", "white"], default="black")
    t.add_argument("--disable-feature-pos-grad", action="store_true",
                   help="drop the feature-to-position gradient term")
    t.add_argument("--save-renders", action="store_true",
                   help="write test-view renders next to the checkpoint")

    r = sub.add_parser("render", help="render views from a checkpoint")
    _add_dataset_flags(r)
    _add_common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--split", choices=["train", "test"], default="test")
    r.add_argument("--view-ids", default=None,
                   help="comma-separated view indices within the split")

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint against a dataset")
    _add_dataset_flags(e)
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")

    b = sub.add_parser("bake", help="bake the texture field over a UV mesh")
    _add_common(b)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--mesh", required=True, help="OBJ with vt/f records")
    b.add_argument("--resolution", type=int, default=256)
    b.add_argument("--out", required=True, help="output texture PNG")

    i = sub.add_parser("info", help="checkpoint statistics")
    _add_common(i)
    i.add_argument("--checkpoint", required=True)
    return ap


def _config_from_args(args) -> TrainConfig:
    if args.profile == "desk":
        cfg = TrainConfig.desk_profile()
    else:
        cfg = TrainConfig()
    updates = {}
    if args.iters is not None:
        updates["stage1_iters"] = max(args.iters // 3, 1)
        updates["stage2_iters"] = max(args.iters - max(args.iters // 3, 1), 1)
    if args.stage1_iters is not None:
        updates["stage1_iters"] = args.stage1_iters
    if args.stage2_iters is not None:
        updates["stage2_iters"] = args.stage2_iters
    for name in ("init_surfels", "max_surfels", "densify_every", "eval_every"):
        val = getattr(args, name)
        if val is not None:
            updates[name] = val
    if args.background == "white":
        updates["background"] = (1.0, 1.0, 1.0)
    updates["seed"] = args.seed
    updates["threads"] = args.threads
    updates["feature_pos_grad"] = not args.disable_feature_pos_grad
    return dataclasses.replace(cfg, **updates)


def _render_mode(scene):
    return "shell" if scene.field is not None and scene.decoder is not None else "sh"


def cmd_train(args) -> int:
    ds = _resolve_dataset(args)
    cfg = _config_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(ds, cfg, log_path=str(out_dir / "train_log.jsonl"))
    sceneio.save_checkpoint(result.scene, out_dir / "checkpoint.bin")
    if args.save_renders:
        opts = RenderOptions(threads=args.threads)
        for i in ds.view_ids("test"):
            out = render(result.scene, ds.cameras[i], _render_mode(result.scene), opts)
            sceneio.save_image(out_dir / f"test_{i:03d}.png", out.image.rgb)
    last = [rec for rec in result.log if "psnr" in rec and rec["psnr"] is not None]
    if last:
        print(f"final held-out psnr: {last[-1]['psnr']:.2f} dB")
    print(f"checkpoint: {out_dir / 'checkpoint.bin'}")
    return 0


def cmd_render(args) -> int:
    ds = _resolve_dataset(args)
    scene = sceneio.load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = ds.view_ids(args.split)
    if args.view_ids is not None:
        picks = [int(x) for x in args.view_ids.split(",")]
        ids = [ids[k] for k in picks]
    opts = RenderOptions(threads=args.threads)
    mode = _render_mode(scene)
    for i in ids:
        out = render(scene, ds.cameras[i], mode, opts)
        sceneio.save_image(out_dir / f"{args.split}_{i:03d}.png", out.image.rgb)
    print(f"wrote {len(ids)} renders to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    ds = _resolve_dataset(args)
    scene = sceneio.load_checkpoint(args.checkpoint)
    opts = RenderOptions(threads=args.threads)
    mode = _render_mode(scene)
    rows = []
    for i in ds.view_ids(args.split):
        out = render(scene, ds.cameras[i], mode, opts)
        gt = ds.images[i][:, :, :3]
        rows.append((i, psnr(out.image.rgb, gt), ssim(out.image.rgb, gt)))
        print(f"view {i:3d}: psnr {rows[-1][1]:6.2f} dB  ssim {rows[-1][2]:.4f}")
    print(f"mean: psnr {np.mean([r[1] for r in rows]):6.2f} dB  "
          f"ssim {np.mean([r[2] for r in rows]):.4f}")
    return 0


def cmd_bake(args) -> int:
    scene = sceneio.load_checkpoint(args.checkpoint)
    mesh = sceneio.load_obj(args.mesh)
    tex, _, skipped = sceneio.bake_texture(scene, mesh, args.resolution)
    if skipped:
        print(f"warning: skipped {skipped} degenerate uv triangles", file=sys.stderr)
    sceneio.save_image(args.out, tex)
    print(f"baked {args.resolution}x{args.resolution} texture to {args.out}")
    return 0


def cmd_info(args) -> int:
    scene = sceneio.load_checkpoint(args.checkpoint)
    sizes = sceneio.checkpoint_sizes(scene)
    mean_ratio, needle = anisotropy_stats(scene.surfels)
    print(f"surfels: {len(scene.surfels)}")
    print(f"geometry_bytes: {sizes['geometry_bytes']}")
    print(f"sh_bytes: {sizes['sh_bytes']}")
    print(f"appearance_bytes: {sizes['appearance_bytes']}")
    if scene.field is not None:
        f = scene.field
        print(f"hash_field: levels={f.levels} table_size={f.table_size} "
              f"feat_dim={f.feat_dim} bound={f.bound}")
    print(f"decoder: {'none' if scene.decoder is None else scene.decoder.param_count()}"
          f"{'' if scene.decoder is None else ' params'}")
    print(f"mean_scale_ratio: {mean_ratio:.4f}")
    print(f"needle_fraction: {needle:.4f}")
    return 0


_COMMANDS = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval,
             "bake": cmd_bake, "info": cmd_info}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
