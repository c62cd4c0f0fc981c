"""Command-line entry point.

Subcommands: gen-data, train, resume, eval, flops, suite, viz.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .backbone import BACKBONE_PRESETS, count_flops, count_macs, flops_table
from .config import ConfigFileError, ExperimentConfig, load_config
from .dataset import generate_scene, load_dataset, save_dataset, scenario_for_seed
from .evaluation import evaluate
from .model import groundtruth_by_frame, predict_scene
from .trainer import (ConfigHashMismatchError, TrainLog, format_suite_table,
                      load_checkpoint, run_experiment_suite, train)


class UsageError(ValueError):
    pass


def _print_config(cfg):
    print("# resolved config")
    print(cfg.resolved_text())


def _load_cfg(args, **extra):
    base = ExperimentConfig(**extra)
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", []) or [],
                      base=base)
    _print_config(cfg)
    return cfg


def cmd_gen_data(args):
    if args.scenes <= 0:
        raise UsageError("--scenes must be positive")
    print(f"# gen-data seed={args.seed} scenes={args.scenes} "
          f"split={args.split or '-'} out={args.out}")
    scenes = [generate_scene(args.seed + i, scenario_for_seed(args.seed + i))
              for i in range(args.scenes)]
    save_dataset(scenes, args.out)
    if args.split:
        try:
            n_train, n_test = (int(x) for x in args.split.split(":"))
        except ValueError:
            raise UsageError(f"--split must be A:B, got {args.split!r}") from None
        if n_train + n_test != args.scenes or n_train <= 0 or n_test <= 0:
            raise UsageError(f"split {args.split} does not partition {args.scenes} scenes")
        for name, chunk in (("train", scenes[:n_train]), ("test", scenes[n_train:])):
            with open(os.path.join(args.out, f"split_{name}.txt"), "w") as f:
                for sc in chunk:
                    f.write(sc.scene_id + "\n")
    print(f"wrote {len(scenes)} scenes to {args.out}")


def _scenes_for_split(data_dir, split):
    scenes = load_dataset(data_dir)
    if split:
        path = os.path.join(data_dir, f"split_{split}.txt")
        with open(path) as f:
            keep = {line.strip() for line in f if line.strip()}
        scenes = [s for s in scenes if s.scene_id in keep]
    return scenes


def cmd_train(args):
    cfg = _load_cfg(args, dataset_dir=args.data, checkpoint_dir=args.out)
    scenes = _scenes_for_split(args.data, args.split)
    log_path = os.path.join(args.out, "train_log.csv")
    os.makedirs(args.out, exist_ok=True)
    log, params, adam = train(cfg, scenes, checkpoint_dir=args.out, log_path=log_path)
    if log.steps:
        print(f"trained {cfg.epochs} epochs, {len(log.steps)} steps, "
              f"final loss {log.losses()[-1]:.4f}")
    else:
        print("trained 0 epochs (untrained checkpoint written)")


def cmd_resume(args):
    cfg = _load_cfg(args, dataset_dir=args.data, checkpoint_dir=args.out)
    scenes = _scenes_for_split(args.data, args.split)
    os.makedirs(args.out, exist_ok=True)
    log, params, adam = train(cfg, scenes, checkpoint_dir=args.out,
                              log_path=os.path.join(args.out, "train_log.csv"),
                              resume_from=args.checkpoint,
                              drop_optimizer_state=args.drop_optimizer_state,
                              drop_rng_state=args.drop_rng_state)
    print(f"resumed to epoch {cfg.epochs}, {len(log.steps)} new steps")


def _restore_params(checkpoint_path, cfg):
    ck = load_checkpoint(checkpoint_path)
    if ck["config_hash"] != cfg.config_hash():
        raise ConfigHashMismatchError(
            f"checkpoint hash {ck['config_hash']} != config hash {cfg.config_hash()}")
    return ck["params"]


def cmd_eval(args):
    cfg = _load_cfg(args, dataset_dir=args.data)
    scenes = _scenes_for_split(args.data, args.split)
    gts = groundtruth_by_frame(scenes)
    if args.oracle:
        preds = {k: [type(g)(g.centerline, g.left_boundary, g.right_boundary,
                             g.class_id, 1.0) for g in v] for k, v in gts.items()}
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --oracle)")
        params = _restore_params(args.checkpoint, cfg)
        preds = {}
        for sc in scenes:
            preds.update(predict_scene(sc, params, cfg))
    report = evaluate(preds, gts)
    text = report.to_text()
    print(text, end="")
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"report written to {args.out}")


def cmd_flops(args):
    if args.preset not in BACKBONE_PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; "
                         f"valid: {', '.join(sorted(BACKBONE_PRESETS))}")
    print(f"# flops preset={args.preset}")
    cfg = BACKBONE_PRESETS[args.preset]
    for name, flops in flops_table(cfg):
        print(f"{name:<28} {flops:>14,}")
    macs = count_macs(cfg)
    print(f"{'total MACs':<28} {macs:>14,}")
    print(f"{'total FLOPs (2 per MAC)':<28} {count_flops(cfg):>14,}")
    r50 = count_macs(BACKBONE_PRESETS["resnet50-shape"])
    r18 = count_macs(BACKBONE_PRESETS["resnet18-shape"])
    print(f"depth-50 / depth-18 MAC ratio: {r50 / r18:.3f}")


def cmd_suite(args):
    cfg = _load_cfg(args, dataset_dir=args.data)
    split = args.split or ("train" if _has_split(args.data) else None)
    train_scenes = _scenes_for_split(args.data, split)
    eval_dir = args.eval_data or args.data
    eval_scenes = _scenes_for_split(eval_dir, "test" if _has_split(eval_dir) else None)
    rows = run_experiment_suite(train_scenes, eval_scenes, epochs=args.epochs,
                                seed=cfg.seed, base_overrides=args.set or [])
    table = format_suite_table(rows)
    print(table)
    if args.out:
        with open(args.out, "w") as f:
            f.write(table + "\n")


def _has_split(data_dir):
    return os.path.exists(os.path.join(data_dir, "split_train.txt"))


def cmd_viz(args):
    cfg = _load_cfg(args, dataset_dir=args.data)
    scenes = {s.scene_id: s for s in load_dataset(args.data)}
    if args.scene not in scenes:
        raise ValueError(f"scene {args.scene!r} not found; "
                         f"available: {', '.join(sorted(scenes))}")
    scene = scenes[args.scene]
    preds_by_frame = None
    if args.checkpoint:
        params = _restore_params(args.checkpoint, cfg)
        preds_by_frame = predict_scene(scene, params, cfg)
    from .viz import render_frame_svg, validate_svg
    extent = (cfg.bev_x_min, cfg.bev_x_max, cfg.bev_y_min, cfg.bev_y_max)
    for t in range(len(scene.frames)):
        preds = preds_by_frame[f"{scene.scene_id}/frame_{t}"] if preds_by_frame else None
        svg = render_frame_svg(scene.groundtruth[t], preds, extent)
        validate_svg(svg)
        path = os.path.join(args.out, f"{scene.scene_id}_frame_{t}.svg")
        os.makedirs(args.out, exist_ok=True)
        with open(path, "w") as f:
            f.write(svg)
        print(f"wrote {path}")


def build_parser():
    p = argparse.ArgumentParser(prog="lanebev",
                                description="lane-topology BEV pipeline tools")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="config override, repeatable")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--split", help="train:test scene counts, e.g. 12:4")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--split", help="dataset split name (train/test)")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("resume", help="resume training from a checkpoint")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split")
    r.add_argument("--out", required=True)
    r.add_argument("--drop-optimizer-state", action="store_true",
                   help="diagnostic: reset Adam moments at resume")
    r.add_argument("--drop-rng-state", action="store_true",
                   help="diagnostic: reseed the RNG at resume")
    r.set_defaults(fn=cmd_resume)

    e = sub.add_parser("eval", help="evaluate predictions (Chamfer mAP)")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--split")
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true",
                   help="evaluate groundtruth against itself (sanity check)")
    e.add_argument("--out", help="report file")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("flops", help="backbone FLOPs report")
    f.add_argument("--preset", required=True)
    f.set_defaults(fn=cmd_flops)

    s = sub.add_parser("suite", help="run the 4-preset experiment comparison")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--split")
    s.add_argument("--eval-data")
    s.add_argument("--epochs", type=int, default=2)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_suite)

    v = sub.add_parser("viz", help="render groundtruth vs prediction SVGs")
    common(v)
    v.add_argument("--data", required=True)
    v.add_argument("--scene", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_viz)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (UsageError, ConfigFileError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, don't traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
