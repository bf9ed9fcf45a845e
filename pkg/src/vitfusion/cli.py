"""Command-line interface: make-synth, train, eval, ablate, render."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .ablation import ABLATION_KINDS, run_ablation
from .config import RunConfig
from .data import SynthConfig, generate_scene, load_dataset, save_scene
from .evaluation import evaluate_model
from .render import render_scene
from .training import model_from_checkpoint, save_checkpoint, train


def _load_run_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _load_scenes(args, cfg: RunConfig):
    data_dir = args.data or cfg.dataset_dir
    if not data_dir:
        raise SystemExit("no dataset: pass --data or set dataset_dir in the config")
    return load_dataset(data_dir, classes=tuple(cfg.classes))


def cmd_make_synth(args):
    if args.synth_config:
        with open(args.synth_config) as fh:
            synth = SynthConfig(**json.load(fh))
    else:
        synth = SynthConfig()
    for i in range(args.scenes):
        sample = generate_scene(synth, args.seed + i)
        sample.scene_id = f"{args.seed + i:06d}"
        save_scene(args.out, sample)
    print(f"wrote {args.scenes} scenes to {args.out}")


def cmd_train(args):
    cfg = _load_run_config(args.config)
    scenes = _load_scenes(args, cfg)
    result = train(cfg, args.mode, scenes,
                   pretrained_camera=args.camera_checkpoint,
                   pretrained_lidar=args.lidar_checkpoint,
                   log_fn=(lambda rec: print(
                       f"step {rec['step']:5d}  total {rec['total']:.4f}  "
                       f"cls {rec['cls']:.4f}  center {rec['center']:.4f}"))
                   if args.verbose else None)
    save_checkpoint(args.out, result.model, args.mode,
                    extra={"final_loss": result.loss_history[-1]})
    print(f"trained {args.mode} for {cfg.steps} steps; "
          f"final loss {result.loss_history[-1]['total']:.4f}; saved {args.out}")


def cmd_eval(args):
    model, meta = model_from_checkpoint(args.checkpoint)
    scenes = _load_scenes(args, model.cfg)
    report = evaluate_model(model, scenes)
    print(report.to_text())
    if args.report:
        report.to_json(args.report)
        print(f"report written to {args.report}")


def cmd_ablate(args):
    cfg = _load_run_config(args.config)
    scenes = _load_scenes(args, cfg)
    report = run_ablation(args.kind, cfg, scenes)
    print(report.to_text())
    if args.report:
        report.to_json(args.report)
        print(f"report written to {args.report}")


def cmd_render(args):
    model, meta = model_from_checkpoint(args.checkpoint)
    scenes = _load_scenes(args, model.cfg)
    by_id = {s.scene_id: s for s in scenes}
    ids = [args.scene] if args.scene else sorted(by_id)
    for sid in ids:
        if sid not in by_id:
            raise SystemExit(f"scene {sid} not found in dataset")
        out = render_scene(model, by_id[sid], args.out,
                           min_confidence=args.min_confidence)
        print(f"{sid}: {out['n_predictions_drawn']} predictions, "
              f"{out['n_gt']} gt -> {out['bev']}, {out['camera']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitfusion",
                                description="hierarchical lidar-camera fusion detector")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("make-synth", help="generate a synthetic KITTI-layout dataset")
    ps.add_argument("--out", required=True)
    ps.add_argument("--scenes", type=int, default=20)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--synth-config", default=None, help="JSON SynthConfig overrides")
    ps.set_defaults(fn=cmd_make_synth)

    pt = sub.add_parser("train", help="train one of the model modes")
    pt.add_argument("--config", default=None, help="RunConfig JSON file")
    pt.add_argument("--mode", required=True,
                    choices=["camera2d", "lidar3d", "fusion", "fusion_pretrained"])
    pt.add_argument("--data", default=None, help="KITTI-layout dataset directory")
    pt.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    pt.add_argument("--camera-checkpoint", default=None)
    pt.add_argument("--lidar-checkpoint", default=None)
    pt.add_argument("--verbose", action="store_true")
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", default=None)
    pe.add_argument("--report", default=None, help="write JSON report here")
    pe.set_defaults(fn=cmd_eval)

    pa = sub.add_parser("ablate", help="run an ablation sweep")
    pa.add_argument("--kind", required=True, choices=sorted(ABLATION_KINDS))
    pa.add_argument("--config", default=None)
    pa.add_argument("--data", default=None)
    pa.add_argument("--report", default=None)
    pa.set_defaults(fn=cmd_ablate)

    pr = sub.add_parser("render", help="render predictions for scenes")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", default=None)
    pr.add_argument("--scene", default=None, help="scene id (default: all)")
    pr.add_argument("--out", required=True)
    pr.add_argument("--min-confidence", type=float, default=0.3)
    pr.set_defaults(fn=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main(sys.argv[1:])
