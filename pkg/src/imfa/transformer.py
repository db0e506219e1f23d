"""Attention, encoder/decoder layers, and prediction heads (pre-norm)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .params import Binding, Params, xavier_uniform
from .tensor import Tensor

FOCAL_PRIOR_BIAS = -4.59511985013459  # -log((1 - 0.01) / 0.01)


@dataclass
class QuerySet:
    """Object queries: content embeddings plus normalized reference boxes."""

    content: Tensor       # N x d
    ref_boxes: Tensor     # N x 4, (cx, cy, w, h) in [0, 1]


def _add_linear(params, rng, name, fan_in, fan_out, zero=False):
    if zero:
        params.add(f"{name}.w", np.zeros((fan_in, fan_out), dtype=np.float32))
    else:
        params.add(f"{name}.w", xavier_uniform(rng, fan_in, fan_out))
    params.add(f"{name}.b", np.zeros(fan_out, dtype=np.float32))


def _add_ln(params, name, d):
    params.add(f"{name}.g", np.ones(d, dtype=np.float32))
    params.add(f"{name}.b", np.zeros(d, dtype=np.float32))


def init_attention_params(params: Params, rng, prefix: str, d: int) -> None:
    for part in ("q", "k", "v", "o"):
        _add_linear(params, rng, f"{prefix}.{part}", d, d)


def init_encoder_layer_params(params: Params, rng, prefix: str, d: int) -> None:
    init_attention_params(params, rng, f"{prefix}.attn", d)
    _add_linear(params, rng, f"{prefix}.ffn1", d, 4 * d)
    _add_linear(params, rng, f"{prefix}.ffn2", 4 * d, d)
    _add_ln(params, f"{prefix}.ln1", d)
    _add_ln(params, f"{prefix}.ln2", d)
    _zero_residual_outputs(params, prefix, cross=False)


def init_decoder_layer_params(params: Params, rng, prefix: str, d: int) -> None:
    init_attention_params(params, rng, f"{prefix}.self", d)
    init_attention_params(params, rng, f"{prefix}.cross", d)
    _add_linear(params, rng, f"{prefix}.ffn1", d, 4 * d)
    _add_linear(params, rng, f"{prefix}.ffn2", 4 * d, d)
    _add_ln(params, f"{prefix}.ln1", d)
    _add_ln(params, f"{prefix}.ln2", d)
    _add_ln(params, f"{prefix}.ln3", d)
    _zero_residual_outputs(params, prefix, cross=True)


def _zero_residual_outputs(params: Params, prefix: str, cross: bool) -> None:
    """Zero the projections feeding residual sums so layers start as identity.

    Keeps deep stacks well conditioned at the start of training regardless of
    how many layers run before the first decoder.
    """
    names = [f"{prefix}.ffn2.w"]
    names += ([f"{prefix}.self.o.w", f"{prefix}.cross.o.w"] if cross
              else [f"{prefix}.attn.o.w"])
    for name in names:
        params[name] = np.zeros_like(params[name])


def init_head_params(params: Params, rng, d: int, num_classes: int) -> None:
    params.add("head.cls.w", xavier_uniform(rng, d, num_classes))
    params.add("head.cls.b", np.full(num_classes, FOCAL_PRIOR_BIAS, dtype=np.float32))
    _add_linear(params, rng, "head.box1", d, d)
    _add_linear(params, rng, "head.box2", d, d)
    # zero-init final layer: initial boxes equal the reference boxes
    _add_linear(params, rng, "head.box3", d, 4, zero=True)


def _linear(pb, name, x):
    return T.matmul(x, pb(f"{name}.w")) + pb(f"{name}.b")


def _ln(pb, name, x):
    return T.layer_norm(x, pb(f"{name}.g"), pb(f"{name}.b"))


def mha(pb: Binding, prefix: str, q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention, output-projected."""
    d = q.shape[-1]
    if d % heads:
        raise DimensionError(f"head count {heads} does not divide width {d}")
    if k.shape != v.shape or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"mha shapes incompatible: q{q.shape} k{k.shape} v{v.shape}")
    dh = d // heads
    a, b = q.shape[0], k.shape[0]

    def split(x, n):
        x = T.reshape(x, (n, heads, dh))
        return T.transpose(x, (1, 0, 2))

    qh = split(_linear(pb, f"{prefix}.q", q), a)
    kh = split(_linear(pb, f"{prefix}.k", k), b)
    vh = split(_linear(pb, f"{prefix}.v", v), b)
    scores = T.bmm(qh, T.transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    mixed = T.bmm(attn, vh)                     # heads x a x dh
    mixed = T.reshape(T.transpose(mixed, (1, 0, 2)), (a, d))
    return _linear(pb, f"{prefix}.o", mixed)


def _ffn(pb, prefix, x):
    return _linear(pb, f"{prefix}.ffn2", T.relu(_linear(pb, f"{prefix}.ffn1", x)))


def encoder_layer(pb: Binding, prefix: str, tokens: Tensor, pos, heads: int) -> Tensor:
    """Pre-norm self-attention block; position added to queries and keys only."""
    pos = pos if isinstance(pos, Tensor) else Tensor(np.asarray(pos, dtype=tokens.dtype))
    if pos.shape != tokens.shape:
        raise DimensionError(f"pos shape {pos.shape} != tokens shape {tokens.shape}")
    h = _ln(pb, f"{prefix}.ln1", tokens)
    x = tokens + mha(pb, f"{prefix}.attn", h + pos, h + pos, h, heads)
    x = x + _ffn(pb, prefix, _ln(pb, f"{prefix}.ln2", x))
    return x


def decoder_layer(pb: Binding, prefix: str, q_content: Tensor, q_pos: Tensor,
                  memory: Tensor, mem_pos, heads: int) -> Tensor:
    """Query self-attention, cross-attention into memory, then FFN."""
    mem_pos = mem_pos if isinstance(mem_pos, Tensor) else Tensor(np.asarray(mem_pos, dtype=memory.dtype))
    if mem_pos.shape != memory.shape:
        raise DimensionError(f"mem_pos shape {mem_pos.shape} != memory shape {memory.shape}")
    h = _ln(pb, f"{prefix}.ln1", q_content)
    x = q_content + mha(pb, f"{prefix}.self", h + q_pos, h + q_pos, h, heads)
    h = _ln(pb, f"{prefix}.ln2", x)
    x = x + mha(pb, f"{prefix}.cross", h + q_pos, memory + mem_pos, memory, heads)
    x = x + _ffn(pb, prefix, _ln(pb, f"{prefix}.ln3", x))
    return x


def prediction_heads(pb: Binding, q: Tensor, ref_boxes: Tensor) -> dict:
    """Class logits and boxes refined around the reference boxes."""
    class_logits = _linear(pb, "head.cls", q)
    h = T.relu(_linear(pb, "head.box1", q))
    h = T.relu(_linear(pb, "head.box2", h))
    offsets = _linear(pb, "head.box3", h)
    boxes = T.sigmoid(T.logit(ref_boxes) + offsets)
    return {"class_logits": class_logits, "boxes": boxes}
