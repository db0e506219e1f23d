"""Gradient verification harness: per-operation and whole-pipeline checks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import generate_scene
from .matching import deep_supervision
from .params import Binding
from .stage import StageConfig, init_pipeline_params, run_model
from .tensor import GradCheckReport, Tape, Tensor, check_gradient


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def op_level_checks(seed: int = 0, tol: float = 1e-4, h: float = 1e-6):
    """Central-difference checks for every differentiable operation class."""
    rng = np.random.default_rng(seed)
    checks = []

    def add(name, f, x, tol=tol):
        checks.append((name, f, np.asarray(x, dtype=np.float64)))

    wa = _rand(rng, 4, 3)
    proj = _rand(rng, 5, 3)
    add("matmul/lhs", lambda x: T.tsum(T.matmul(T.reshape(x, (5, 4)), wa) * proj),
        _rand(rng, 20))
    la = _rand(rng, 5, 4)
    add("matmul/rhs", lambda x: T.tsum(T.matmul(la, T.reshape(x, (4, 3))) * proj),
        _rand(rng, 12))
    ba = _rand(rng, 2, 3, 4)
    bp = _rand(rng, 2, 3, 5)
    add("bmm", lambda x: T.tsum(T.bmm(ba, T.reshape(x, (2, 4, 5))) * bp),
        _rand(rng, 40))
    w6 = _rand(rng, 6)
    add("softmax", lambda x: T.tsum(T.softmax(T.reshape(x, (2, 3)), axis=-1)
                                    * w6.reshape(2, 3)), _rand(rng, 6))
    gain = _rand(rng, 5)
    bias = _rand(rng, 5)
    w10 = _rand(rng, 10)
    add("layer_norm", lambda x: T.tsum(T.layer_norm(T.reshape(x, (2, 5)), Tensor(gain),
                                                    Tensor(bias)) * w10.reshape(2, 5)),
        _rand(rng, 10))
    add("add_mul_div", lambda x: T.tsum((x * 1.7 + 0.3) / (x * x + 2.0)), _rand(rng, 7))
    add("relu", lambda x: T.tsum(T.relu(x) * w6), _rand(rng, 6) + np.sign(_rand(rng, 6)) * 0.2)
    add("sigmoid", lambda x: T.tsum(T.sigmoid(x) * w6), _rand(rng, 6))
    add("exp_log_sqrt", lambda x: T.tsum(T.log(T.exp(x) + 1.0) + T.sqrt(x * x + 1.0)),
        _rand(rng, 6))
    add("softplus", lambda x: T.tsum(T.softplus(x) * w6), _rand(rng, 6) * 3)
    add("abs", lambda x: T.tsum(T.absolute(x)), _rand(rng, 6) + np.sign(_rand(rng, 6)) * 0.2)
    mb = _rand(rng, 6)
    add("maximum_minimum", lambda x: T.tsum(T.maximum(x, mb) + T.minimum(x * 0.5, mb)),
        _rand(rng, 6) + 0.4)
    add("sin_cos", lambda x: T.tsum(T.sin(x) + T.cos(x * 0.7)), _rand(rng, 6))
    idx = np.array([2, 0, 2, 1])
    w4 = _rand(rng, 4, 3)
    add("take_rows", lambda x: T.tsum(T.take_rows(T.reshape(x, (3, 3)), idx) * w4[:, :3]),
        _rand(rng, 9))
    add("concat_narrow", lambda x: T.tsum(T.narrow(T.concat([T.reshape(x, (2, 3)),
                                                             T.reshape(x * 2.0, (2, 3))],
                                                            axis=0), 0, 1, 2) * w6.reshape(2, 3)),
        _rand(rng, 6))
    grid = _rand(rng, 4, 5, 3)
    pts = np.clip(rng.uniform(0.12, 0.88, size=(6, 2)), None, None)
    wpt = _rand(rng, 6, 3)
    add("bilinear_sample/grid", lambda x: T.tsum(T.bilinear_sample(
        T.reshape(x, (4, 5, 3)), Tensor(pts)) * wpt), grid.ravel())
    gridc = Tensor(grid)
    add("bilinear_sample/points", lambda x: T.tsum(T.bilinear_sample(
        gridc, T.reshape(x, (6, 2))) * wpt), pts.ravel())

    reports = []
    for name, f, x in checks:
        reports.append((name, check_gradient(f, x, h=h, tol=tol)))
    return reports


def pipeline_check(tol: float = 1e-3, h: float = 1e-6, coords_per_param: int = 3,
                   seed: int = 0, image_size: int = 32):
    """Finite-difference check of the full staged pipeline loss.

    Every parameter tensor is probed at a seeded subset of coordinates to
    keep the runtime bounded.
    """
    cfg = StageConfig(num_stages=3, num_queries=6, sampling_ratio=0.5,
                      keypoints_per_region=2, heads=2, d=16, num_classes=3)
    params = init_pipeline_params(cfg, seed).astype(np.float64)
    # jitter past the init's structural zeros so every path carries gradient
    jitter = np.random.default_rng(seed + 11)
    for name, arr in params.items():
        params[name] = arr + jitter.normal(scale=0.05, size=arr.shape)
    img, ann = generate_scene(seed + 100, size=image_size, max_objects=2)
    img = img.astype(np.float64)

    def loss_value(p):
        result = run_model(img, cfg, p, dtype=np.float64)
        loss, _ = deep_supervision(result.stage_predictions, ann.boxes,
                                   ann.classes, cfg.num_classes)
        return loss

    result = run_model(img, cfg, params, dtype=np.float64)
    loss, _ = deep_supervision(result.stage_predictions, ann.boxes,
                               ann.classes, cfg.num_classes)
    grads = result.binding.grads(result.tape.backward(loss))

    rng = np.random.default_rng(seed + 7)
    max_err = 0.0
    failures = []
    checked = 0
    for name, arr in params.items():
        size = arr.size
        count = min(coords_per_param, size)
        coords = rng.choice(size, size=count, replace=False)
        for c in coords:
            checked += 1
            p2 = params.copy().astype(np.float64)
            flat = p2[name].ravel().copy()
            flat[c] += h
            p2[name] = flat.reshape(arr.shape)
            fp = loss_value(p2).item()
            flat[c] -= 2 * h
            p2[name] = flat.reshape(arr.shape)
            fm = loss_value(p2).item()
            numeric = (fp - fm) / (2 * h)
            analytic = grads[name].ravel()[c]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
            max_err = max(max_err, err)
            if err > tol:
                failures.append((f"{name}[{c}]", float(analytic), float(numeric), float(err)))
    return GradCheckReport(max_rel_err=max_err, tol=tol, checked=checked,
                           failures=failures)


def nonzero_gradient_check(seed: int = 0):
    """Every learned parameter must receive a nonzero gradient somewhere."""
    cfg = StageConfig(num_stages=3, num_queries=8, sampling_ratio=0.5,
                      keypoints_per_region=3, heads=2, d=16, num_classes=3)
    params = init_pipeline_params(cfg, seed)
    # jitter away from the structural zeros of the init so connectivity,
    # not the particular starting point, is what gets tested
    jitter = np.random.default_rng(seed + 11)
    for name, arr in params.items():
        params[name] = arr + jitter.normal(scale=0.05, size=arr.shape).astype(arr.dtype)
    img, ann = generate_scene(seed + 3, size=64, max_objects=3)
    result = run_model(img, cfg, params)
    loss, _ = deep_supervision(result.stage_predictions, ann.boxes,
                               ann.classes, cfg.num_classes)
    grads = result.binding.grads(result.tape.backward(loss))
    zero = [name for name, g in grads.items() if not np.any(g)]
    return zero
