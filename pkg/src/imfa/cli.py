"""Command-line harness: train, eval, budget, visualize, gradcheck, gen-data."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .budget import compute_budget
from .checkpoint import load_checkpoint, save_checkpoint
from .data import read_dataset, write_dataset
from .errors import ConfigError, DataError
from .evalap import (empty_detections, evaluate_detections, oracle_detections,
                     predictions_to_detections)
from .gradcheck import nonzero_gradient_check, op_level_checks, pipeline_check
from .imageio import read_blob, read_ppm
from .stage import StageConfig, run_model
from .train import OptimConfig, evaluate_model, train
from .viz import render_overlay_svg


@dataclass
class RunConfig:
    """Everything a reproducible run needs; serializes to flat JSON."""

    # model
    num_stages: int = 3
    num_queries: int = 30
    sampling_ratio: float = 0.2
    keypoints: int = 8
    heads: int = 8
    d: int = 64
    num_classes: int = 3
    sample_strides: tuple = (4, 8, 16, 32)
    variant: str = "imfa"
    # ablation arms
    iter_enc_only: bool = False
    disable_rep_keypoints: bool = False
    disable_ada_scale: bool = False
    disable_dynamic_ffn: bool = False
    # optimizer
    lr_main: float = 1e-3
    lr_backbone: float = 1e-4
    weight_decay: float = 1e-4
    steps: int = 2000
    lr_drop_step: int | None = None
    batch_size: int = 4
    grad_clip: float = 1.0
    # run
    dataset: str = ""
    seed: int = 0
    precision: str = "single"
    threads: int = 1

    def stage_config(self) -> StageConfig:
        return StageConfig(
            num_stages=self.num_stages,
            num_queries=self.num_queries,
            sampling_ratio=self.sampling_ratio,
            keypoints_per_region=self.keypoints,
            sample_strides=tuple(self.sample_strides),
            heads=self.heads,
            d=self.d,
            num_classes=self.num_classes,
            variant=self.variant,
            iter_enc_only=self.iter_enc_only,
            disable_rep_keypoints=self.disable_rep_keypoints,
            disable_ada_scale=self.disable_ada_scale,
            disable_dynamic_ffn=self.disable_dynamic_ffn,
        )

    def optim_config(self) -> OptimConfig:
        return OptimConfig(
            lr_main=self.lr_main,
            lr_backbone=self.lr_backbone,
            weight_decay=self.weight_decay,
            steps=self.steps,
            lr_drop_step=self.lr_drop_step,
            batch_size=self.batch_size,
            grad_clip=self.grad_clip,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sample_strides"] = list(self.sample_strides)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.sample_strides = tuple(cfg.sample_strides)
        return cfg


def _build_config(args) -> RunConfig:
    base = RunConfig().to_dict()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                base.update(json.load(fh))
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        except ValueError as e:
            raise ConfigError(f"malformed config {args.config}: {e}") from e
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            base[f.name] = val
    raw_threads = os.environ.get("IMFA_THREADS", base.get("threads", 1))
    try:
        base["threads"] = int(raw_threads)
    except ValueError as e:
        raise ConfigError(f"IMFA_THREADS must be an integer, got {raw_threads!r}") from e
    if base["threads"] < 1:
        raise ConfigError(f"thread count must be positive, got {base['threads']}")
    return RunConfig.from_dict(base)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file overriding config defaults")
    p.add_argument("--num-stages", dest="num_stages", type=int)
    p.add_argument("--num-queries", dest="num_queries", type=int)
    p.add_argument("--sampling-ratio", dest="sampling_ratio", type=float)
    p.add_argument("--keypoints", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--variant", choices=("imfa", "baseline"))
    for flag in ("iter-enc-only", "disable-rep-keypoints", "disable-ada-scale",
                 "disable-dynamic-ffn"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"),
                       action="store_const", const=True)
    p.add_argument("--lr-main", dest="lr_main", type=float)
    p.add_argument("--lr-backbone", dest="lr_backbone", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr-drop-step", dest="lr_drop_step", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--dataset")
    p.add_argument("--seed", type=int)


def cmd_train(args) -> int:
    cfg = _build_config(args)
    if not cfg.dataset:
        raise ConfigError("train requires --dataset")
    dataset = read_dataset(cfg.dataset)
    stage_cfg = cfg.stage_config()
    with open(args.metrics, "w") as fh:
        params, _ = train(stage_cfg, cfg.optim_config(), dataset, cfg.seed,
                          metrics_fh=fh)
    save_checkpoint(args.out, params, cfg.to_dict())
    return 0


def cmd_eval(args) -> int:
    params, cfg_dict, _ = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(cfg_dict)
    dataset = read_dataset(args.dataset)
    stage_cfg = cfg.stage_config()
    max_cls = max((int(c) for ann in dataset.annotations for c in ann.classes),
                  default=-1)
    if max_cls >= stage_cfg.num_classes:
        raise ConfigError(
            f"dataset class id {max_cls} exceeds checkpoint num_classes "
            f"{stage_cfg.num_classes}")
    mode = args.predictions
    if mode == "model":
        report = evaluate_model(stage_cfg, params, dataset)
    else:
        if mode == "oracle":
            dets = [oracle_detections(ann) for ann in dataset.annotations]
        else:
            dets = [empty_detections() for _ in dataset.annotations]
        report = evaluate_detections(dets, dataset.annotations, stage_cfg.num_classes)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_budget(args) -> int:
    dense = tuple(int(s) for s in args.dense_strides.split(","))
    report = compute_budget(args.height, args.width, args.d, args.num_queries,
                            args.sampling_ratio, args.keypoints,
                            dense_strides=dense, single_stride=args.single_stride)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_visualize(args) -> int:
    params, cfg_dict, _ = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(cfg_dict)
    stage_cfg = cfg.stage_config()
    if not stage_cfg.samples_enabled:
        raise ConfigError("visualize requires a sampling-enabled checkpoint")
    if args.image.endswith(".ppm"):
        img = read_ppm(args.image)
    else:
        img = read_blob(args.image)
    result = run_model(img, stage_cfg, params)
    sampled = result.states[-1].sampled
    if sampled is None:
        raise ConfigError("no sampled tokens in the final stage")
    svg = render_overlay_svg(img, sampled.owner_boxes, sampled.keypoints,
                             sampled.scale_weights, stage_cfg.keypoints_per_region)
    with open(args.out, "w") as fh:
        fh.write(svg)
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for name, report in op_level_checks(tol=args.tol):
        status = "PASS" if report.ok else "FAIL"
        ok = ok and report.ok
        print(f"[{status}] op {name}: max rel err {report.max_rel_err:.3e} "
              f"({report.checked} coords, tol {report.tol:g})")
    report = pipeline_check(tol=args.pipeline_tol)
    status = "PASS" if report.ok else "FAIL"
    ok = ok and report.ok
    print(f"[{status}] full pipeline: max rel err {report.max_rel_err:.3e} "
          f"({report.checked} coords, tol {report.tol:g})")
    zero = nonzero_gradient_check()
    status = "PASS" if not zero else "FAIL"
    ok = ok and not zero
    print(f"[{status}] nonzero gradients: {len(zero)} dead parameters"
          + (f" ({zero})" if zero else ""))
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    mix = tuple(float(v) for v in args.scale_mix.split(","))
    if len(mix) != 3:
        raise ConfigError("--scale-mix needs three comma-separated weights")
    write_dataset(args.out, args.n, args.seed, size=args.size, scale_mix=mix,
                  min_objects=args.min_objects, max_objects=args.max_objects)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imfa",
        description="Staged detection pipeline with sparse multi-scale sampling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint stem (.bin/.json)")
    p.add_argument("--metrics", required=True, help="JSON-lines metrics path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="AP report for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", choices=("model", "oracle", "none"),
                   default="model")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("budget", help="token and attention-cost accounting")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--num-queries", dest="num_queries", type=int, default=30)
    p.add_argument("--sampling-ratio", dest="sampling_ratio", type=float, default=0.2)
    p.add_argument("--keypoints", type=int, default=8)
    p.add_argument("--dense-strides", dest="dense_strides", default="8,16,32")
    p.add_argument("--single-stride", dest="single_stride", type=int, default=32)
    p.set_defaults(fn=cmd_budget)

    p = sub.add_parser("visualize", help="SVG overlay of boxes and keypoints")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help=".ppm or raw .bin image")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--pipeline-tol", dest="pipeline_tol", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--scale-mix", dest="scale_mix", default="0.34,0.33,0.33")
    p.add_argument("--min-objects", dest="min_objects", type=int, default=1)
    p.add_argument("--max-objects", dest="max_objects", type=int, default=6)
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
