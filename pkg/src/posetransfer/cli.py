"""Command-line entry point: ``posetransfer <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, flat_defaults, load_config, save_config, with_overrides
from .data import (
    TORSO_PALETTE, DatasetError, generate_toy_dataset, load_dataset, read_image, write_image,
)
from .metrics import MetricError, PaletteProbe, make_report
from .networks import PROFILES, SpecError, all_specs, verify_spec
from .pose import (
    DEFAULT_DILATE_RADIUS, DEFAULT_SIGMA, KeypointError, build_pose_mask, encode_heatmaps,
    read_annotations,
)
from .train import (
    CheckpointError, TrainingDiverged, generate, load_checkpoint, load_generators, train_stage1,
    train_stage2,
)

log = logging.getLogger("posetransfer")

RUN_ROOT_ENV = "POSETRANSFER_RUN_ROOT"
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _fail(msg: str, code: int = EXIT_FAILURE) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc
    return h, w


# make-toy

def cmd_make_toy(args) -> int:
    try:
        pairs = generate_toy_dataset(args.out, args.n_pairs, args.canvas, args.seed)
    except (DatasetError, ValueError, RuntimeError) as exc:
        return _fail(str(exc))
    print(f"wrote {len(pairs)} pairs ({2 * len(pairs)} images) to {args.out}")
    return 0


# verify-arch

def cmd_verify_arch(args) -> int:
    profiles = [args.profile] if args.profile else list(PROFILES)
    failed = False
    for profile in profiles:
        try:
            specs = all_specs(profile, args.image_size, args.width_divisor)
        except SpecError as exc:
            print(f"[FAIL] {profile}: {exc}")
            failed = True
            continue
        for spec, shape in specs:
            try:
                trace = verify_spec(spec, shape)
            except SpecError as exc:
                print(f"[FAIL] {profile} {spec.name}: {exc}")
                failed = True
                continue
            print(f"[OK] {profile} {spec.name} input {list(shape)}")
            for name, out in trace:
                print(f"    {name:<10} -> {list(out)}")
    return EXIT_FAILURE if failed else 0


# train

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config keys (override the config file)")
    for key, default in flat_defaults(RunConfig).items():
        flag = "--" + key.replace("_", "-")
        if key in ("stage",):
            continue
        if key in ("image_size", "merge_weights"):
            group.add_argument(flag, dest=key, nargs=2, type=float if key == "merge_weights" else int,
                               default=None, help=f"default: {default}")
        elif default is None:
            group.add_argument(flag, dest=key, default=None, help="default: None")
        else:
            group.add_argument(flag, dest=key, type=type(default), default=None,
                               help=f"default: {default}")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    keys = flat_defaults(RunConfig)
    overrides = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    overrides["stage"] = args.stage
    return with_overrides(cfg, overrides)


def cmd_train(args) -> int:
    try:
        cfg = _run_config(args)
    except (ConfigError, OSError) as exc:
        return _fail(str(exc), EXIT_USAGE)
    if cfg.dataset_root is None:
        return _fail("dataset_root is not set (config key or --dataset-root)", EXIT_USAGE)
    if cfg.stage == 2 and not cfg.g1_checkpoint:
        return _fail("stage 2 needs a trained G1: pass --g1-checkpoint <stage-1 run>/checkpoints/step_N.ckpt",
                     EXIT_USAGE)
    run_dir = cfg.run_dir or str(Path(os.environ.get(RUN_ROOT_ENV, "runs")) / f"stage{cfg.stage}")
    try:
        records = load_dataset(cfg.dataset_root, cfg.pairs_file, cfg.image_size)
        if not records:
            return _fail(f"dataset {cfg.dataset_root} has no pairs")
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        tcfg = cfg.train_config()
        if cfg.stage == 1:
            result = train_stage1(tcfg, records, run_dir, cfg.resume_from)
        else:
            result = train_stage2(tcfg, records, cfg.g1_checkpoint, run_dir, cfg.resume_from)
        # full snapshot including paths
        save_config(cfg, Path(run_dir) / "config.json")
    except TrainingDiverged as exc:
        return _fail(f"training aborted: {exc}")
    except (DatasetError, CheckpointError, ValueError, OSError) as exc:
        return _fail(str(exc))
    last = result.history[-1] if result.history else {}
    print(f"stage {cfg.stage} done: {result.checkpoint}")
    if last:
        print("final " + " ".join(f"{k}={v:.5g}" for k, v in last.items() if k != "step"))
    return 0


# generate

def cmd_generate(args) -> int:
    try:
        g1, g2 = load_generators(args.checkpoint)
        saved = load_checkpoint(args.checkpoint[-1])["config"]
    except CheckpointError as exc:
        return _fail(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sigma = args.sigma if args.sigma is not None else saved["sigma"]
    weights = tuple(args.merge_weights if args.merge_weights is not None else saved["merge_weights"])
    try:
        if args.dataset:
            records = load_dataset(args.dataset, args.pairs_file, tuple(g1.image_size))
            for sub in ("coarse", "difference", "images"):
                (out / sub).mkdir(exist_ok=True)
            for r in records:
                y1, y2, y = generate(g1, g2, read_image(r.cond_image_path), r.target_keypoints,
                                     sigma, weights)
                name = r.target_image_path.name
                write_image(out / "coarse" / name, y1.numpy())
                write_image(out / "difference" / name, y2.numpy())
                write_image(out / "images" / name, y.numpy())
            print(f"generated {len(records)} images in {out / 'images'}")
            return 0
        if not (args.cond and args.keypoints and args.target):
            return _fail("pass --dataset, or all of --cond, --keypoints and --target", EXIT_USAGE)
        x = read_image(args.cond)
        kps = read_annotations(args.keypoints, tuple(x.shape[1:]))
        if args.target not in kps:
            return _fail(f"{args.target} not found in {args.keypoints}")
        y1, y2, y = generate(g1, g2, x, kps[args.target], sigma, weights)
    except (DatasetError, KeypointError, CheckpointError) as exc:
        return _fail(str(exc))
    write_image(out / "coarse.png", y1.numpy())
    write_image(out / "difference.png", y2.numpy())
    write_image(out / "final.png", y.numpy())
    grid = torch.cat([torch.as_tensor(x), y1, y2, y], dim=2)
    write_image(out / "grid.png", grid.numpy())
    print(f"wrote coarse.png, difference.png, final.png, grid.png to {out}")
    return 0


# eval

def cmd_eval(args) -> int:
    probe = PaletteProbe(TORSO_PALETTE / 255.0)
    try:
        report = make_report(args.generated, args.targets, args.annotations, probe, args.profile,
                             splits=args.splits, dilate_radius=args.dilate_radius)
    except (MetricError, DatasetError, KeypointError, OSError) as exc:
        return _fail(str(exc))
    if args.out:
        report.write(args.out)
    print("metric,value,std,n")
    for row in report.rows():
        print(f"{row['metric']},{row['value']:.6f},{row['std']:.6f},{row['n']}")
    return 0


# inspect-pose

def cmd_inspect_pose(args) -> int:
    try:
        kps = read_annotations(args.annotations, args.image_size)
        if args.image not in kps:
            return _fail(f"{args.image} not in {args.annotations}")
        k = kps[args.image]
        heat = encode_heatmaps(k, args.sigma).max(axis=0)
        mask = build_pose_mask(k, args.dilate_radius)
    except (KeypointError, ValueError) as exc:
        return _fail(str(exc))
    vis = np.stack([heat, mask.astype(np.float32), heat]) * 2.0 - 1.0
    write_image(args.out, vis)
    info = {"visible": int(k.visible.sum()), "mask_pixels": int(mask.sum()),
            "peaks": {i: list(k.pixel(i)) for i in np.flatnonzero(k.visible).tolist()}}
    print(json.dumps(info))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posetransfer", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="write a procedural toy pair dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-pairs", type=int, default=100, help="default: 100")
    p.add_argument("--canvas", type=_size, default=(64, 32), help="HxW, default: 64x32")
    p.add_argument("--seed", type=int, default=0, help="default: 0")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("verify-arch", help="shape-check the layer tables")
    p.add_argument("--profile", choices=PROFILES, default=None, help="default: both")
    p.add_argument("--image-size", type=_size, default=None, help="HxW, default: profile size")
    p.add_argument("--width-divisor", type=int, default=1, help="default: 1")
    p.set_defaults(func=cmd_verify_arch)

    p = sub.add_parser("train", help="run stage 1 or stage 2 training")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", default=None, help="JSON run config")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="synthesize images from checkpoints")
    p.add_argument("--checkpoint", nargs="+", required=True,
                   help="stage-2 checkpoint, or stage-1 (+ stage-2) checkpoints")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default=None, help="generate every pair of a dataset root")
    p.add_argument("--pairs-file", default="pairs.csv", help="default: pairs.csv")
    p.add_argument("--cond", default=None, help="conditional image")
    p.add_argument("--keypoints", default=None, help="annotation file holding the target keypoints")
    p.add_argument("--target", default=None, help="annotation row name for the target pose")
    p.add_argument("--sigma", type=float, default=None, help="default: the checkpoint's training value")
    p.add_argument("--merge-weights", type=float, nargs=2, default=None,
                   help="default: the checkpoint's training value")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="SSIM / IS / mask-SSIM / mask-IS report")
    p.add_argument("--generated", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--profile", choices=PROFILES, default="market", help="default: market")
    p.add_argument("--splits", type=int, default=10, help="default: 10")
    p.add_argument("--dilate-radius", type=int, default=DEFAULT_DILATE_RADIUS,
                   help=f"default: {DEFAULT_DILATE_RADIUS}")
    p.add_argument("--out", default=None, help="directory for report.csv / report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-pose", help="render heatmaps and mask for one annotation row")
    p.add_argument("--annotations", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--image-size", type=_size, required=True, help="HxW")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help=f"default: {DEFAULT_SIGMA}")
    p.add_argument("--dilate-radius", type=int, default=DEFAULT_DILATE_RADIUS,
                   help=f"default: {DEFAULT_DILATE_RADIUS}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_pose)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
