"""Stacked detection stages with sparse multi-scale feature sampling.

Each stage runs one encoder layer, one decoder layer, and the prediction
heads.  From the second stage on, the top-K confident prior predictions
guide keypoint prediction, scale-adaptive bilinear sampling from the
feature pyramid, and a query-conditioned dynamic FFN; the resulting
sampled tokens join the encoder input for that stage only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .params import Binding, Params, xavier_uniform, normal
from .pyramid import (FeaturePyramid, build_pyramid, init_backbone_params,
                      patch_embed, sine_grid_positions, sine_point_positions)
from .tensor import Tape, Tensor
from .transformer import (QuerySet, decoder_layer, encoder_layer,
                          init_decoder_layer_params, init_encoder_layer_params,
                          init_head_params, prediction_heads)

PYRAMID_STRIDES = (4, 8, 16, 32)
ENCODER_STRIDE = 32


@dataclass
class StageConfig:
    """Model shape and ablation switches for the staged pipeline."""

    num_stages: int = 3
    num_queries: int = 30
    sampling_ratio: float = 0.2
    keypoints_per_region: int = 8
    sample_strides: tuple = PYRAMID_STRIDES
    heads: int = 8
    d: int = 64
    num_classes: int = 3
    variant: str = "imfa"            # "imfa" or "baseline"
    iter_enc_only: bool = False
    disable_rep_keypoints: bool = False
    disable_ada_scale: bool = False
    disable_dynamic_ffn: bool = False

    def __post_init__(self):
        if self.num_stages < 1:
            raise ConfigError("num_stages must be at least 1")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be at least 1")
        if not 0.0 < self.sampling_ratio <= 1.0:
            raise ConfigError(f"sampling_ratio must be in (0, 1], got {self.sampling_ratio}")
        if self.keypoints_per_region < 1:
            raise ConfigError("keypoints_per_region must be at least 1")
        if self.d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d={self.d}")
        if self.d % 4:
            raise ConfigError(f"d={self.d} must be divisible by 4")
        if self.variant not in ("imfa", "baseline"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if any(s not in PYRAMID_STRIDES for s in self.sample_strides):
            raise ConfigError(f"sample_strides must be among {PYRAMID_STRIDES}")

    @property
    def num_regions(self) -> int:
        return max(1, int(self.num_queries * self.sampling_ratio))

    @property
    def num_scales(self) -> int:
        return len(self.sample_strides)

    @property
    def samples_enabled(self) -> bool:
        return (self.variant == "imfa" and not self.iter_enc_only
                and self.num_stages >= 2)


@dataclass
class SampledTokenSet:
    """K*M scale-adaptive tokens plus their bookkeeping."""

    features: Tensor              # K*M x d
    points: Tensor                # K*M x 2, live on the stage's tape
    keypoints: np.ndarray         # K*M x 2, normalized (x, y)
    scale_weights: np.ndarray     # K*M x S
    owner_query: np.ndarray       # K*M query indices
    owner_boxes: np.ndarray       # K x 4, clamped (x0, y0, x1, y1)
    provenance: list = field(default_factory=list)


@dataclass
class StageState:
    """Carry-over between stages: only image tokens and queries persist."""

    image_tokens: Tensor
    image_pos: np.ndarray
    queries: QuerySet
    predictions: dict | None = None
    sampled: SampledTokenSet | None = None
    provenance: list = field(default_factory=list)

    @property
    def t_img(self) -> int:
        return self.image_tokens.shape[0]


@dataclass
class PipelineResult:
    stage_predictions: list
    states: list
    pyramid: FeaturePyramid | None
    tape: Tape
    binding: Binding


# ---------------------------------------------------------------------------
# parameters


def init_pipeline_params(cfg: StageConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    params = Params()
    init_backbone_params(params, rng, cfg.d, stride=PYRAMID_STRIDES[0],
                         strides=PYRAMID_STRIDES)
    for t in range(cfg.num_stages):
        init_encoder_layer_params(params, rng, f"stage{t}.enc", cfg.d)
        init_decoder_layer_params(params, rng, f"stage{t}.dec", cfg.d)
    init_head_params(params, rng, cfg.d, cfg.num_classes)
    params.add("queries.embed", normal(rng, (cfg.num_queries, cfg.d), std=0.05))
    params.add("queries.ref_logit", normal(rng, (cfg.num_queries, 4), std=0.5))
    if cfg.samples_enabled:
        init_sampler_params(params, rng, cfg)
    return params


def init_sampler_params(params: Params, rng, cfg: StageConfig) -> None:
    d, m, s = cfg.d, cfg.keypoints_per_region, cfg.num_scales
    params.add("sampler.kp1.w", xavier_uniform(rng, d, d))
    params.add("sampler.kp1.b", np.zeros(d, dtype=np.float32))
    params.add("sampler.kp2.w", xavier_uniform(rng, d, 2 * m))
    params.add("sampler.kp2.b", np.zeros(2 * m, dtype=np.float32))
    params.add("sampler.scale.w", xavier_uniform(rng, d, m * s))
    params.add("sampler.scale.b", np.zeros(m * s, dtype=np.float32))
    hh = max(1, d // 4)
    params.add("sampler.dyn.w", xavier_uniform(rng, d, 2 * d * hh))
    params.add("sampler.dyn.b", np.zeros(2 * d * hh, dtype=np.float32))
    params.add("sampler.dyn_ln.g", np.ones(d, dtype=np.float32))
    params.add("sampler.dyn_ln.b", np.zeros(d, dtype=np.float32))
    params.add("sampler.gate", np.full(d, 0.1, dtype=np.float32))


# ---------------------------------------------------------------------------
# sampling building blocks


def select_promising(class_logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K most confident predictions, ties to lower index.

    Confidence is the max class sigmoid probability.
    """
    n = class_logits.shape[0]
    if k > n:
        raise ConfigError(f"cannot select K={k} regions from N={n} predictions")
    conf = 1.0 / (1.0 + np.exp(-class_logits))
    conf = conf.max(axis=1)
    return np.argsort(-conf, kind="stable")[:k]


def clamp_boxes_xyxy(boxes: Tensor) -> tuple:
    """Split (cx, cy, w, h) boxes into corners clamped to the unit square."""
    cx = T.narrow(boxes, 1, 0, 1)
    cy = T.narrow(boxes, 1, 1, 1)
    w = T.narrow(boxes, 1, 2, 1)
    h = T.narrow(boxes, 1, 3, 1)
    x0 = T.clamp(cx - w * 0.5, 0.0, 1.0)
    y0 = T.clamp(cy - h * 0.5, 0.0, 1.0)
    x1 = T.clamp(cx + w * 0.5, 0.0, 1.0)
    y1 = T.clamp(cy + h * 0.5, 0.0, 1.0)
    return x0, y0, x1, y1


def predict_keypoints(pb: Binding, q_sel: Tensor, boxes: Tensor, m: int,
                      rng=None) -> Tensor:
    """M in-box keypoints per region as sigmoid fractions of the box.

    Containment holds by construction: fractions in (0, 1) are mapped
    affinely into the clamped box.  With `rng` set, fractions are drawn
    uniformly instead of predicted (random-sampling ablation arm).
    """
    k = q_sel.shape[0]
    if rng is None:
        hidden = T.relu(T.matmul(q_sel, pb("sampler.kp1.w")) + pb("sampler.kp1.b"))
        logits = T.matmul(hidden, pb("sampler.kp2.w")) + pb("sampler.kp2.b")
        frac = T.reshape(T.sigmoid(logits), (k, m, 2))
    else:
        frac = Tensor(rng.uniform(size=(k, m, 2)).astype(q_sel.dtype))
    x0, y0, x1, y1 = clamp_boxes_xyxy(boxes)
    fx = T.narrow(frac, 2, 0, 1)
    fy = T.narrow(frac, 2, 1, 1)
    px = T.reshape(x0, (k, 1, 1)) + fx * T.reshape(x1 - x0, (k, 1, 1))
    py = T.reshape(y0, (k, 1, 1)) + fy * T.reshape(y1 - y0, (k, 1, 1))
    return T.reshape(T.concat([px, py], axis=2), (k * m, 2))


def sample_scale_adaptive(pb: Binding, points: Tensor, q_sel: Tensor,
                          pyramid: FeaturePyramid, cfg: StageConfig) -> tuple:
    """Weighted sum of per-scale bilinear samples; returns (features, alpha)."""
    k = q_sel.shape[0]
    m = cfg.keypoints_per_region
    s = cfg.num_scales
    d = cfg.d
    try:
        levels = [pyramid.level_for_stride(st) for st in cfg.sample_strides]
    except DimensionError as e:
        raise ConfigError(str(e)) from e
    per_scale = [T.bilinear_sample(lv.grid, points) for lv in levels]
    stacked = T.concat([T.reshape(f, (1, k * m, d)) for f in per_scale], axis=0)
    if cfg.disable_ada_scale:
        alpha = Tensor(np.full((k, m, s), 1.0 / s, dtype=q_sel.dtype))
    else:
        logits = T.matmul(q_sel, pb("sampler.scale.w")) + pb("sampler.scale.b")
        alpha = T.softmax(T.reshape(logits, (k, m, s)), axis=-1)
    weights = T.reshape(T.transpose(T.reshape(alpha, (k * m, s)), (1, 0)), (s, k * m, 1))
    features = T.tsum(stacked * weights, axis=0)
    return features, alpha


def dynamic_ffn(pb: Binding, features: Tensor, q_sel: Tensor, m: int) -> Tensor:
    """Residual FFN whose weight matrices come from the owning query."""
    k, d = q_sel.shape
    hh = max(1, d // 4)
    w = T.matmul(q_sel, pb("sampler.dyn.w")) + pb("sampler.dyn.b")
    w1 = T.reshape(T.narrow(w, 1, 0, d * hh), (k, d, hh))
    w2 = T.reshape(T.narrow(w, 1, d * hh, hh * d), (k, hh, d))
    fk = T.reshape(features, (k, m, d))
    mid = T.relu(T.bmm(fk, w1))
    out = T.layer_norm(fk + T.bmm(mid, w2), pb("sampler.dyn_ln.g"), pb("sampler.dyn_ln.b"))
    return T.reshape(out, (k * m, d))


def build_sampled_tokens(pb: Binding, state: StageState, pyramid: FeaturePyramid,
                         cfg: StageConfig, stage_index: int, rng=None) -> SampledTokenSet:
    k = cfg.num_regions
    m = cfg.keypoints_per_region
    idx = select_promising(state.predictions["class_logits"].data, k)
    q_sel = T.take_rows(state.queries.content, idx)
    b_sel = T.take_rows(state.queries.ref_boxes, idx)
    kp_rng = rng if cfg.disable_rep_keypoints else None
    points = predict_keypoints(pb, q_sel, b_sel, m, rng=kp_rng)
    features, alpha = sample_scale_adaptive(pb, points, q_sel, pyramid, cfg)
    if not cfg.disable_dynamic_ffn:
        features = dynamic_ffn(pb, features, q_sel, m)
    # learned branch gate, initialized small so sampling starts near-quiet
    features = features * pb("sampler.gate")
    x0, y0, x1, y1 = clamp_boxes_xyxy(b_sel)
    corners = np.concatenate([x0.data, y0.data, x1.data, y1.data], axis=1)
    return SampledTokenSet(
        features=features,
        points=points,
        keypoints=points.data.copy(),
        scale_weights=alpha.data.reshape(k * m, cfg.num_scales).copy(),
        owner_query=np.repeat(idx, m),
        owner_boxes=corners,
        provenance=[f"stage{stage_index}:sampled:{i}" for i in range(k * m)],
    )


# ---------------------------------------------------------------------------
# stages


def run_stage(state: StageState, pyramid: FeaturePyramid, pb: Binding,
              cfg: StageConfig, stage_index: int, rng=None) -> StageState:
    """One detection stage; sampled tokens live only inside this call."""
    if stage_index < 0:
        raise ConfigError("stage_index must be non-negative")
    d = cfg.d
    sampling = (cfg.samples_enabled and stage_index >= 1
                and state.predictions is not None)
    if sampling:
        sampled = build_sampled_tokens(pb, state, pyramid, cfg, stage_index, rng)
        samp_pos = sine_point_positions(sampled.points, d)
        enc_in = T.concat([state.image_tokens, sampled.features], axis=0)
        enc_pos = T.concat([Tensor(state.image_pos), samp_pos], axis=0)
        provenance = list(state.provenance) + list(sampled.provenance)
    else:
        sampled = None
        enc_in = state.image_tokens
        enc_pos = Tensor(state.image_pos)
        provenance = list(state.provenance)

    t_img = state.t_img
    enc_out = encoder_layer(pb, f"stage{stage_index}.enc", enc_in, enc_pos, cfg.heads)
    # skip connection on the image-token positions only
    if sampling:
        img_out = T.narrow(enc_out, 0, 0, t_img) + state.image_tokens
        memory = T.concat([img_out, T.narrow(enc_out, 0, t_img, enc_out.shape[0] - t_img)], axis=0)
        mem_pos = enc_pos
    else:
        img_out = enc_out + state.image_tokens
        memory = img_out
        mem_pos = enc_pos

    centers = T.narrow(state.queries.ref_boxes, 1, 0, 2)
    q_pos = sine_point_positions(centers, d)
    new_q = decoder_layer(pb, f"stage{stage_index}.dec", state.queries.content,
                          q_pos, memory, mem_pos, cfg.heads)
    preds = prediction_heads(pb, new_q, state.queries.ref_boxes)
    return StageState(
        image_tokens=img_out,
        image_pos=state.image_pos,
        queries=QuerySet(content=new_q, ref_boxes=preds["boxes"]),
        predictions=preds,
        sampled=sampled,
        provenance=list(state.provenance),
    )


def _initial_state(pb: Binding, img: np.ndarray, cfg: StageConfig, dtype):
    base = patch_embed(pb, np.asarray(img, dtype=dtype or np.float32), cfg.d,
                       stride=PYRAMID_STRIDES[0])
    pyramid = build_pyramid(pb, base, strides=PYRAMID_STRIDES)
    top = pyramid.level_for_stride(ENCODER_STRIDE)
    h32, w32, _ = top.grid.shape
    tokens = T.reshape(top.grid, (h32 * w32, cfg.d))
    pos = sine_grid_positions(h32, w32, cfg.d, dtype=tokens.dtype)
    queries = QuerySet(content=pb("queries.embed"),
                       ref_boxes=T.sigmoid(pb("queries.ref_logit")))
    state = StageState(
        image_tokens=tokens,
        image_pos=pos,
        queries=queries,
        provenance=[f"img:{i}" for i in range(h32 * w32)],
    )
    return pyramid, state


def run_pipeline(img: np.ndarray, cfg: StageConfig, params: Params,
                 tape: Tape | None = None, dtype=None, rng=None) -> PipelineResult:
    """Backbone, pyramid, and all detection stages for one image."""
    tape = tape or Tape()
    pb = Binding(params, tape, dtype)
    pyramid, state = _initial_state(pb, img, cfg, dtype)
    preds, states = [], [state]
    for t in range(cfg.num_stages):
        state = run_stage(state, pyramid, pb, cfg, t, rng)
        preds.append(state.predictions)
        states.append(state)
    return PipelineResult(stage_predictions=preds, states=states,
                          pyramid=pyramid, tape=tape, binding=pb)


def run_baseline(img: np.ndarray, cfg: StageConfig, params: Params,
                 tape: Tape | None = None, dtype=None) -> PipelineResult:
    """Non-staged reference pipeline: all encoder layers, then all decoders."""
    tape = tape or Tape()
    pb = Binding(params, tape, dtype)
    pyramid, state = _initial_state(pb, img, cfg, dtype)
    pos = Tensor(state.image_pos)
    x = state.image_tokens
    for t in range(cfg.num_stages):
        x = encoder_layer(pb, f"stage{t}.enc", x, pos, cfg.heads) + x
    q = state.queries.content
    ref = state.queries.ref_boxes
    preds, states = [], [state]
    for t in range(cfg.num_stages):
        centers = T.narrow(ref, 1, 0, 2)
        q_pos = sine_point_positions(centers, cfg.d)
        q = decoder_layer(pb, f"stage{t}.dec", q, q_pos, x, pos, cfg.heads)
        p = prediction_heads(pb, q, ref)
        ref = p["boxes"]
        preds.append(p)
        states.append(StageState(image_tokens=x, image_pos=state.image_pos,
                                 queries=QuerySet(q, ref), predictions=p,
                                 provenance=list(state.provenance)))
    return PipelineResult(stage_predictions=preds, states=states,
                          pyramid=pyramid, tape=tape, binding=pb)


def run_iterative_encoding(img: np.ndarray, cfg: StageConfig, params: Params,
                           tape: Tape | None = None, dtype=None) -> PipelineResult:
    """Plain iterative-encoding pipeline: staged, but with no sampler at all.

    Kept as an independent code path; with sampling disabled, run_pipeline
    must match it bit for bit.
    """
    tape = tape or Tape()
    pb = Binding(params, tape, dtype)
    pyramid, state = _initial_state(pb, img, cfg, dtype)
    pos = Tensor(state.image_pos)
    x = state.image_tokens
    q = state.queries.content
    ref = state.queries.ref_boxes
    preds, states = [], [state]
    for t in range(cfg.num_stages):
        enc = encoder_layer(pb, f"stage{t}.enc", x, pos, cfg.heads)
        x = enc + x
        centers = T.narrow(ref, 1, 0, 2)
        q_pos = sine_point_positions(centers, cfg.d)
        q = decoder_layer(pb, f"stage{t}.dec", q, q_pos, x, pos, cfg.heads)
        p = prediction_heads(pb, q, ref)
        ref = p["boxes"]
        preds.append(p)
        states.append(StageState(image_tokens=x, image_pos=state.image_pos,
                                 queries=QuerySet(q, ref), predictions=p,
                                 provenance=list(state.provenance)))
    return PipelineResult(stage_predictions=preds, states=states,
                          pyramid=pyramid, tape=tape, binding=pb)


def run_model(img: np.ndarray, cfg: StageConfig, params: Params,
              tape: Tape | None = None, dtype=None, rng=None) -> PipelineResult:
    if cfg.variant == "baseline":
        return run_baseline(img, cfg, params, tape=tape, dtype=dtype)
    return run_pipeline(img, cfg, params, tape=tape, dtype=dtype, rng=rng)
