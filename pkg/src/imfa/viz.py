"""SVG overlays of predicted boxes, keypoints, and scale weights."""

from __future__ import annotations

import base64
import io

import numpy as np

SCALE_COLORS = ("#e6194b", "#f58231", "#3cb44b", "#4363d8")
BOX_COLOR = "#ffe119"


def _png_base64(img: np.ndarray) -> str:
    from PIL import Image

    u8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _f(v: float) -> str:
    return f"{v:.2f}"


def render_overlay_svg(img: np.ndarray, owner_boxes: np.ndarray,
                       keypoints: np.ndarray, scale_weights: np.ndarray,
                       keypoints_per_region: int) -> str:
    """Deterministic SVG: image, K region boxes, K*M colored keypoints.

    owner_boxes: K x 4 clamped (x0, y0, x1, y1) normalized.
    keypoints: K*M x 2 normalized (x, y); scale_weights: K*M x S.
    Keypoints are colored by their argmax scale; each carries a small bar
    glyph showing the full weight distribution.
    """
    h, w = img.shape[:2]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<image href="data:image/png;base64,{_png_base64(img)}" '
        f'x="0" y="0" width="{w}" height="{h}"/>',
    ]
    for box in np.asarray(owner_boxes, dtype=np.float64):
        x0, y0, x1, y1 = box
        parts.append(
            f'<rect x="{_f(x0 * w)}" y="{_f(y0 * h)}" width="{_f((x1 - x0) * w)}" '
            f'height="{_f((y1 - y0) * h)}" fill="none" stroke="{BOX_COLOR}" '
            f'stroke-width="1"/>')
    kp = np.asarray(keypoints, dtype=np.float64)
    sw = np.asarray(scale_weights, dtype=np.float64)
    bar_w = 1.2
    bar_h = 5.0
    for i in range(kp.shape[0]):
        x = kp[i, 0] * w
        y = kp[i, 1] * h
        top = int(np.argmax(sw[i]))
        color = SCALE_COLORS[top % len(SCALE_COLORS)]
        parts.append(f'<circle class="kp" cx="{_f(x)}" cy="{_f(y)}" r="1.5" '
                     f'fill="{color}"/>')
        for s in range(sw.shape[1]):
            hgt = bar_h * sw[i, s]
            parts.append(
                f'<rect class="alpha" x="{_f(x + 2.5 + s * bar_w)}" '
                f'y="{_f(y - hgt)}" width="{_f(bar_w)}" height="{_f(hgt)}" '
                f'fill="{SCALE_COLORS[s % len(SCALE_COLORS)]}"/>')
    parts.append("</svg>")
    return "\n".join(parts)
