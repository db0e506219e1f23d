"""Closed-form token counts and attention-cost accounting."""

from __future__ import annotations

from dataclasses import dataclass, asdict

from .errors import ConfigError


@dataclass
class BudgetReport:
    """Token counts and quadratic attention-cost proxies per configuration."""

    image_height: int
    image_width: int
    d: int
    single_stride: int
    dense_strides: tuple
    tokens_single: int
    tokens_dense: int
    tokens_imfa: int
    added_tokens: int
    token_ratio_dense: float
    token_ratio_imfa: float
    cost_single: int
    cost_dense: int
    cost_imfa: int
    cost_ratio_dense: float
    cost_ratio_imfa: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_strides"] = list(self.dense_strides)
        return d


def tokens_at_stride(h: int, w: int, stride: int) -> int:
    if h % stride or w % stride:
        raise ConfigError(f"image {h}x{w} not divisible by stride {stride}")
    return (h // stride) * (w // stride)


def compute_budget(h: int, w: int, d: int, num_queries: int,
                   sampling_ratio: float, keypoints: int,
                   dense_strides=(8, 16, 32), single_stride: int = 32) -> BudgetReport:
    """Single-scale vs dense multi-scale vs sparse-sampling token budgets."""
    single = tokens_at_stride(h, w, single_stride)
    dense = sum(tokens_at_stride(h, w, s) for s in dense_strides)
    k = max(1, int(num_queries * sampling_ratio))
    imfa = single + k * keypoints

    def cost(tokens: int) -> int:
        return tokens * tokens * d

    return BudgetReport(
        image_height=h,
        image_width=w,
        d=d,
        single_stride=single_stride,
        dense_strides=tuple(dense_strides),
        tokens_single=single,
        tokens_dense=dense,
        tokens_imfa=imfa,
        added_tokens=imfa - single,
        token_ratio_dense=dense / single,
        token_ratio_imfa=imfa / single,
        cost_single=cost(single),
        cost_dense=cost(dense),
        cost_imfa=cost(imfa),
        cost_ratio_dense=cost(dense) / cost(single),
        cost_ratio_imfa=cost(imfa) / cost(single),
    )
