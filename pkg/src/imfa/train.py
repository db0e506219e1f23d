"""Deterministic gradient-descent training with decoupled weight decay."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .evalap import evaluate_detections, predictions_to_detections
from .matching import deep_supervision
from .params import Params
from .stage import StageConfig, init_pipeline_params, run_model


@dataclass
class OptimConfig:
    lr_main: float = 1e-3
    lr_backbone: float = 1e-4
    weight_decay: float = 1e-4
    steps: int = 2000
    lr_drop_step: int | None = None      # default: 80% of steps
    batch_size: int = 4
    grad_clip: float = 1.0

    @property
    def drop_step(self) -> int:
        if self.lr_drop_step is not None:
            return self.lr_drop_step
        return int(self.steps * 0.8)


class AdamW:
    """Adam with decoupled weight decay; 1-D parameters are not decayed."""

    def __init__(self, params: Params, opt: OptimConfig,
                 betas=(0.9, 0.999), eps=1e-8):
        self.opt = opt
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(a) for n, a in params.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.items()}

    def step(self, params: Params, grads: dict, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name in params.names():
            g = grads[name].astype(np.float32)
            lr = (self.opt.lr_backbone if name.startswith("backbone.")
                  else self.opt.lr_main) * lr_scale
            p = params[name]
            if p.ndim > 1 and self.opt.weight_decay:
                p = p * (1.0 - lr * self.opt.weight_decay)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mh = self.m[name] / bias1
            vh = self.v[name] / bias2
            params[name] = p - lr * mh / (np.sqrt(vh) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                              for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total


def image_loss(img, ann, cfg: StageConfig, params: Params, rng=None):
    """Forward one image and apply deep supervision across stages."""
    result = run_model(img, cfg, params, rng=rng)
    loss, parts = deep_supervision(result.stage_predictions, ann.boxes,
                                   ann.classes, cfg.num_classes)
    return loss, parts, result


def train(cfg: StageConfig, opt: OptimConfig, dataset: Dataset, seed: int,
          metrics_fh=None, params: Params | None = None):
    """Run the optimization loop; returns (params, metrics list)."""
    if params is None:
        params = init_pipeline_params(cfg, seed)
    optimizer = AdamW(params, opt)
    batch_rng = np.random.default_rng((seed, 1))
    metrics = []
    n = len(dataset)
    for step in range(opt.steps):
        batch = batch_rng.integers(0, n, size=opt.batch_size)
        accum = None
        loss_sum = 0.0
        parts_sum = {"cls": 0.0, "l1": 0.0, "giou": 0.0}
        for j, i in enumerate(batch):
            img = dataset.images[i]
            ann = dataset.annotations[i]
            ab_rng = (np.random.default_rng((seed, 2, step, int(j)))
                      if cfg.disable_rep_keypoints else None)
            loss, parts, result = image_loss(img, ann, cfg, params, rng=ab_rng)
            gmap = result.tape.backward(loss)
            g = result.binding.grads(gmap)
            if accum is None:
                accum = g
            else:
                for name in accum:
                    accum[name] = accum[name] + g[name]
            loss_sum += loss.item()
            for k in parts_sum:
                parts_sum[k] += parts[k]
        inv = 1.0 / opt.batch_size
        for name in accum:
            accum[name] = accum[name] * inv
        grad_norm = clip_global_norm(accum, opt.grad_clip)
        lr_scale = 0.1 if step >= opt.drop_step else 1.0
        optimizer.step(params, accum, lr_scale)
        record = {
            "step": step,
            "loss": loss_sum * inv,
            "loss_cls": parts_sum["cls"] * inv,
            "loss_l1": parts_sum["l1"] * inv,
            "loss_giou": parts_sum["giou"] * inv,
            "grad_norm": grad_norm,
        }
        metrics.append(record)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
    return params, metrics


def evaluate_model(cfg: StageConfig, params: Params, dataset: Dataset) -> dict:
    """AP report of the final-stage predictions over a dataset."""
    dets = []
    for i, img in enumerate(dataset.images):
        ab_rng = (np.random.default_rng((7, i)) if cfg.disable_rep_keypoints else None)
        result = run_model(img, cfg, params, rng=ab_rng)
        dets.append(predictions_to_detections(result.stage_predictions[-1]))
    return evaluate_detections(dets, dataset.annotations, cfg.num_classes)
