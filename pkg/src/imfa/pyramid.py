"""Toy backbone: patch embedding, pooled feature pyramid, sine positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .params import Binding, Params, xavier_uniform
from .tensor import Tensor

SINE_TEMPERATURE = 100.0


@dataclass
class PyramidLevel:
    stride: int
    grid: Tensor  # H_s x W_s x d


@dataclass
class FeaturePyramid:
    levels: list

    def level_for_stride(self, stride: int) -> PyramidLevel:
        for lv in self.levels:
            if lv.stride == stride:
                return lv
        raise DimensionError(f"no pyramid level with stride {stride}")


def init_backbone_params(params: Params, rng, d: int, stride: int = 4,
                         strides=(4, 8, 16, 32)) -> None:
    patch_dim = stride * stride * 3
    params.add("backbone.embed.w", xavier_uniform(rng, patch_dim, d))
    params.add("backbone.embed.b", np.zeros(d, dtype=np.float32))
    for s in strides[1:]:
        params.add(f"backbone.level{s}.w", xavier_uniform(rng, d, d))
        params.add(f"backbone.level{s}.b", np.zeros(d, dtype=np.float32))


def patch_embed(pb: Binding, img: np.ndarray, d: int, stride: int = 4) -> Tensor:
    """Flatten non-overlapping stride x stride patches and project to d."""
    img = np.asarray(img)
    h, w, c = img.shape
    if h % stride or w % stride:
        raise DimensionError(f"image size {h}x{w} not divisible by patch stride {stride}")
    hs, ws = h // stride, w // stride
    patches = (img.reshape(hs, stride, ws, stride, c)
               .transpose(0, 2, 1, 3, 4)
               .reshape(hs * ws, stride * stride * c))
    wmat = pb("backbone.embed.w")
    patches = patches.astype(wmat.dtype)
    out = T.matmul(Tensor(patches), wmat) + pb("backbone.embed.b")
    return T.reshape(out, (hs, ws, d))


def build_pyramid(pb: Binding, base: Tensor, strides=(4, 8, 16, 32)) -> FeaturePyramid:
    """Stack of feature grids; each coarser level is a pooled projection."""
    h, w, d = base.shape
    if h < 8 or w < 8:
        raise DimensionError(f"pyramid base must be at least 8x8, got {h}x{w}")
    levels = [PyramidLevel(strides[0], base)]
    cur = base
    for s in strides[1:]:
        ch, cw, _ = cur.shape
        pooled = T.reshape(cur, (ch // 2, 2, cw // 2, 2, d))
        pooled = T.tsum(pooled, axis=3)
        pooled = T.tsum(pooled, axis=1) * 0.25
        flat = T.reshape(pooled, ((ch // 2) * (cw // 2), d))
        proj = T.relu(T.matmul(flat, pb(f"backbone.level{s}.w")) + pb(f"backbone.level{s}.b"))
        cur = T.reshape(proj, (ch // 2, cw // 2, d))
        levels.append(PyramidLevel(s, cur))
    return FeaturePyramid(levels)


def sine_point_positions(points, d: int) -> Tensor:
    """2-D sine/cosine encoding of normalized (x, y) points -> (P, d).

    Differentiable in the point coordinates; the grid form uses the same
    formula at cell centers so the two agree exactly there.
    """
    if d % 4:
        raise DimensionError(f"positional width d={d} must be divisible by 4")
    q = d // 4
    freqs = (2.0 * np.pi) / (SINE_TEMPERATURE ** (np.arange(q) / q))
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float32))
    freqs = freqs.astype(pts.dtype)[None, :]
    x = T.narrow(pts, 1, 0, 1)
    y = T.narrow(pts, 1, 1, 1)
    xf = x * freqs
    yf = y * freqs
    return T.concat([T.sin(xf), T.cos(xf), T.sin(yf), T.cos(yf)], axis=1)


def sine_grid_positions(h: int, w: int, d: int, dtype=np.float32) -> np.ndarray:
    """Encoding for every cell center of an h x w grid -> (h*w, d)."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    centers = np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1)
    return sine_point_positions(Tensor(centers.astype(dtype)), d).data
