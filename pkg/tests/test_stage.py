"""Staged pipeline: region selection, sampling invariants, stage wiring."""

import numpy as np
import pytest

from imfa import tensor as T
from imfa.errors import ConfigError
from imfa.params import Binding
from imfa.pyramid import build_pyramid
from imfa.stage import (StageConfig, build_sampled_tokens, clamp_boxes_xyxy,
                        dynamic_ffn, init_pipeline_params, predict_keypoints,
                        run_iterative_encoding, run_model, run_pipeline,
                        sample_scale_adaptive, select_promising)
from imfa.tensor import Tape, Tensor

SMALL = dict(num_stages=3, num_queries=6, sampling_ratio=0.5,
             keypoints_per_region=2, heads=2, d=16, num_classes=3)


def small_cfg(**kw):
    return StageConfig(**{**SMALL, **kw})


def random_image(seed, size=32):
    return np.random.default_rng(seed).uniform(size=(size, size, 3)).astype(np.float32)


# ---------------------------------------------------------------------------
# config


def test_config_region_count():
    assert StageConfig(num_queries=300, sampling_ratio=0.2).num_regions == 60
    assert StageConfig(num_queries=30, sampling_ratio=0.2).num_regions == 6
    assert StageConfig(num_queries=5, sampling_ratio=0.01).num_regions == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        StageConfig(sampling_ratio=0.0)
    with pytest.raises(ConfigError):
        StageConfig(heads=7)
    with pytest.raises(ConfigError):
        StageConfig(variant="what")
    with pytest.raises(ConfigError):
        StageConfig(sample_strides=(3, 8))


def test_samples_enabled_logic():
    assert StageConfig().samples_enabled
    assert not StageConfig(iter_enc_only=True).samples_enabled
    assert not StageConfig(variant="baseline").samples_enabled
    assert not StageConfig(num_stages=1).samples_enabled


# ---------------------------------------------------------------------------
# promising-region selection


def test_select_promising_ties_take_lower_indices():
    logits = np.zeros((5, 3))
    np.testing.assert_array_equal(select_promising(logits, 3), [0, 1, 2])


def test_select_promising_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        logits = rng.standard_normal((12, 3))
        k = int(rng.integers(1, 13))
        got = select_promising(logits, k)
        conf = (1 / (1 + np.exp(-logits))).max(axis=1)
        expect = sorted(range(12), key=lambda i: (-conf[i], i))[:k]
        np.testing.assert_array_equal(got, expect)


def test_select_promising_rejects_large_k():
    with pytest.raises(ConfigError):
        select_promising(np.zeros((4, 2)), 5)


# ---------------------------------------------------------------------------
# keypoints


def sampler_binding(cfg, seed=0):
    params = init_pipeline_params(cfg, seed)
    return params, Binding(params, Tape())


def test_keypoints_center_for_zero_mlp():
    cfg = small_cfg()
    params, _ = sampler_binding(cfg)
    for name in ("sampler.kp1.w", "sampler.kp2.w"):
        params[name] = np.zeros_like(params[name])
    pb = Binding(params, Tape())
    q = Tensor(np.random.default_rng(1).standard_normal((3, 16)).astype(np.float32))
    boxes = Tensor(np.array([[0.5, 0.5, 0.4, 0.2]] * 3, dtype=np.float32))
    pts = predict_keypoints(pb, q, boxes, cfg.keypoints_per_region)
    np.testing.assert_allclose(pts.data[:, 0], 0.5, atol=1e-6)
    np.testing.assert_allclose(pts.data[:, 1], 0.5, atol=1e-6)


def test_keypoints_always_inside_clamped_box():
    cfg = small_cfg()
    rng = np.random.default_rng(2)
    for trial in range(100):
        params, pb = sampler_binding(cfg, seed=trial)
        k, m = 4, cfg.keypoints_per_region
        q = Tensor((rng.standard_normal((k, 16)) * 3).astype(np.float32))
        boxes_t = Tensor(rng.uniform(0.0, 1.0, size=(k, 4)).astype(np.float32))
        pts = predict_keypoints(pb, q, boxes_t, m).data.reshape(k, m, 2)
        x0, y0, x1, y1 = (v.data[:, 0] for v in clamp_boxes_xyxy(boxes_t))
        for i in range(k):
            assert np.all(pts[i, :, 0] >= x0[i] - 1e-6)
            assert np.all(pts[i, :, 0] <= x1[i] + 1e-6)
            assert np.all(pts[i, :, 1] >= y0[i] - 1e-6)
            assert np.all(pts[i, :, 1] <= y1[i] + 1e-6)


# ---------------------------------------------------------------------------
# scale-adaptive sampling


def pyramid_for(pb, cfg, seed=0):
    base = Tensor(np.random.default_rng(seed).standard_normal((8, 8, cfg.d)).astype(np.float32))
    return build_pyramid(pb, base)


def test_sample_one_hot_alpha_picks_single_level():
    cfg = small_cfg()
    params, pb = sampler_binding(cfg)
    # saturate the scale logits toward level 2
    w = np.zeros_like(params["sampler.scale.b"])
    w = w.reshape(cfg.keypoints_per_region, cfg.num_scales)
    w[:, 2] = 50.0
    params["sampler.scale.b"] = w.reshape(-1)
    params["sampler.scale.w"] = np.zeros_like(params["sampler.scale.w"])
    pb = Binding(params, Tape())
    pyr = pyramid_for(pb, cfg)
    rng = np.random.default_rng(3)
    k, m = 2, cfg.keypoints_per_region
    q = Tensor(rng.standard_normal((k, cfg.d)).astype(np.float32))
    pts = Tensor(rng.uniform(0.1, 0.9, size=(k * m, 2)).astype(np.float32))
    feats, alpha = sample_scale_adaptive(pb, pts, q, pyr, cfg)
    direct = T.bilinear_sample(pyr.level_for_stride(cfg.sample_strides[2]).grid, pts)
    np.testing.assert_allclose(feats.data, direct.data, atol=1e-6)


def test_sample_uniform_alpha_is_mean():
    cfg = small_cfg(disable_ada_scale=True)
    params, pb = sampler_binding(small_cfg())
    pb = Binding(params, Tape())
    pyr = pyramid_for(pb, cfg)
    rng = np.random.default_rng(4)
    k, m = 2, cfg.keypoints_per_region
    q = Tensor(rng.standard_normal((k, cfg.d)).astype(np.float32))
    pts = Tensor(rng.uniform(0.1, 0.9, size=(k * m, 2)).astype(np.float32))
    feats, alpha = sample_scale_adaptive(pb, pts, q, pyr, cfg)
    per = [T.bilinear_sample(pyr.level_for_stride(s).grid, pts).data
           for s in cfg.sample_strides]
    np.testing.assert_allclose(feats.data, np.mean(per, axis=0), atol=1e-6)
    np.testing.assert_allclose(alpha.data, 1.0 / cfg.num_scales)


def test_sample_convex_hull_property():
    cfg = small_cfg()
    rng = np.random.default_rng(5)
    for trial in range(50):
        params, pb = sampler_binding(cfg, seed=trial + 10)
        pyr = pyramid_for(pb, cfg, seed=trial)
        k, m = 3, cfg.keypoints_per_region
        q = Tensor((rng.standard_normal((k, cfg.d)) * 2).astype(np.float32))
        pts = Tensor(rng.uniform(size=(k * m, 2)).astype(np.float32))
        feats, alpha = sample_scale_adaptive(pb, pts, q, pyr, cfg)
        a = alpha.data.reshape(k * m, cfg.num_scales)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(a >= 0)
        per = np.stack([T.bilinear_sample(pyr.level_for_stride(s).grid, pts).data
                        for s in cfg.sample_strides])
        assert np.all(feats.data >= per.min(axis=0) - 1e-5)
        assert np.all(feats.data <= per.max(axis=0) + 1e-5)


def test_sample_rejects_missing_level():
    cfg = small_cfg()
    params, pb = sampler_binding(cfg)
    base = Tensor(np.zeros((8, 8, cfg.d), dtype=np.float32))
    pyr = build_pyramid(pb, base, strides=(4, 8))
    q = Tensor(np.zeros((1, cfg.d), dtype=np.float32))
    pts = Tensor(np.full((cfg.keypoints_per_region, 2), 0.5, dtype=np.float32))
    with pytest.raises(ConfigError):
        sample_scale_adaptive(pb, pts, q, pyr, cfg)


# ---------------------------------------------------------------------------
# dynamic FFN


def test_dynamic_ffn_zero_psi_is_plain_norm():
    cfg = small_cfg()
    params, _ = sampler_binding(cfg)
    params["sampler.dyn.w"] = np.zeros_like(params["sampler.dyn.w"])
    pb = Binding(params, Tape())
    rng = np.random.default_rng(6)
    k, m = 2, cfg.keypoints_per_region
    feats = Tensor(rng.standard_normal((k * m, cfg.d)).astype(np.float32))
    q = Tensor(rng.standard_normal((k, cfg.d)).astype(np.float32))
    out = dynamic_ffn(pb, feats, q, m)
    expect = T.layer_norm(feats, Tensor(params["sampler.dyn_ln.g"]),
                          Tensor(params["sampler.dyn_ln.b"]))
    np.testing.assert_allclose(out.data, expect.data, atol=1e-6)


def test_dynamic_ffn_identical_queries_share_weights():
    cfg = small_cfg()
    params, pb = sampler_binding(cfg, seed=7)
    rng = np.random.default_rng(8)
    m = cfg.keypoints_per_region
    frow = rng.standard_normal((m, cfg.d)).astype(np.float32)
    feats = Tensor(np.concatenate([frow, frow], axis=0))
    qrow = rng.standard_normal((1, cfg.d)).astype(np.float32)
    q = Tensor(np.concatenate([qrow, qrow], axis=0))
    out = dynamic_ffn(pb, feats, q, m).data
    np.testing.assert_array_equal(out[:m], out[m:])


# ---------------------------------------------------------------------------
# full pipeline wiring


def test_pipeline_prediction_shapes():
    cfg = small_cfg()
    params = init_pipeline_params(cfg, 0)
    res = run_pipeline(random_image(0), cfg, params)
    assert len(res.stage_predictions) == cfg.num_stages
    for p in res.stage_predictions:
        assert p["class_logits"].shape == (cfg.num_queries, cfg.num_classes)
        assert p["boxes"].shape == (cfg.num_queries, 4)


def test_pipeline_deterministic_across_runs():
    cfg = small_cfg()
    params = init_pipeline_params(cfg, 1)
    img = random_image(1)
    a = run_pipeline(img, cfg, params)
    b = run_pipeline(img, cfg, params)
    for pa, pb_ in zip(a.stage_predictions, b.stage_predictions):
        np.testing.assert_array_equal(pa["boxes"].data, pb_["boxes"].data)
        np.testing.assert_array_equal(pa["class_logits"].data, pb_["class_logits"].data)


def test_stage_zero_has_no_samples_then_km_after():
    cfg = small_cfg()
    params = init_pipeline_params(cfg, 2)
    res = run_pipeline(random_image(2), cfg, params)
    km = cfg.num_regions * cfg.keypoints_per_region
    assert res.states[1].sampled is None
    for state in res.states[2:]:
        assert state.sampled is not None
        assert state.sampled.features.shape == (km, cfg.d)


def test_image_token_count_constant_across_stages():
    cfg = small_cfg()
    params = init_pipeline_params(cfg, 3)
    res = run_pipeline(random_image(3), cfg, params)
    counts = {s.t_img for s in res.states}
    assert counts == {1}              # 32x32 image at stride 32


def test_no_sampled_provenance_survives():
    cfg = small_cfg()
    params = init_pipeline_params(cfg, 4)
    res = run_pipeline(random_image(4, size=64), cfg, params)
    for state in res.states:
        assert all(p.startswith("img:") for p in state.provenance)
    for t, state in enumerate(res.states[2:], start=1):
        for p in state.sampled.provenance:
            assert p.startswith(f"stage{t}:sampled:")


def test_sampling_disabled_matches_reference_bitwise():
    cfg = small_cfg(iter_enc_only=True)
    params = init_pipeline_params(cfg, 5)
    img = random_image(5, size=64)
    a = run_pipeline(img, cfg, params)
    b = run_iterative_encoding(img, cfg, params)
    for pa, pb_ in zip(a.stage_predictions, b.stage_predictions):
        assert pa["boxes"].data.tobytes() == pb_["boxes"].data.tobytes()
        assert pa["class_logits"].data.tobytes() == pb_["class_logits"].data.tobytes()


def test_baseline_variant_runs_and_differs():
    cfg = small_cfg(variant="baseline")
    params = init_pipeline_params(cfg, 6)
    res = run_model(random_image(6), cfg, params)
    assert len(res.stage_predictions) == cfg.num_stages
    assert all(s.sampled is None for s in res.states)


def test_build_sampled_tokens_ownership():
    cfg = small_cfg()
    params = init_pipeline_params(cfg, 7)
    res = run_pipeline(random_image(7, size=64), cfg, params)
    sampled = res.states[-1].sampled
    k, m = cfg.num_regions, cfg.keypoints_per_region
    assert sampled.owner_query.shape == (k * m,)
    assert sampled.owner_boxes.shape == (k, 4)
    kp = sampled.keypoints.reshape(k, m, 2)
    for i in range(k):
        x0, y0, x1, y1 = sampled.owner_boxes[i]
        assert np.all(kp[i, :, 0] >= x0 - 1e-6) and np.all(kp[i, :, 0] <= x1 + 1e-6)
        assert np.all(kp[i, :, 1] >= y0 - 1e-6) and np.all(kp[i, :, 1] <= y1 + 1e-6)
