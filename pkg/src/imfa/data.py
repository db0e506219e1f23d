"""Synthetic multi-scale scene generator with exact annotations."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DatasetIOError
from .imageio import read_blob, write_blob

CLASS_NAMES = ("rectangle", "circle", "triangle")

# area fractions mirroring the small / medium / large convention
SMALL_BAND = (0.004, 0.018)
MEDIUM_BAND = (0.018, 0.09)
LARGE_BAND = (0.09, 0.20)
_BANDS = (SMALL_BAND, MEDIUM_BAND, LARGE_BAND)

MAX_OBJECTS = 12


@dataclass
class SceneAnnotation:
    """Exact ground truth for one image."""

    boxes: np.ndarray            # n x 4 normalized (cx, cy, w, h)
    classes: np.ndarray          # n class ids in {0..C-1}
    image: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.intp).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise DataError("boxes and classes disagree in length")
        if len(self.boxes) > MAX_OBJECTS:
            raise DataError(f"scene has {len(self.boxes)} objects, max is {MAX_OBJECTS}")


def _textured_background(rng, size):
    coarse = rng.uniform(0.05, 0.30, size=(size // 16, size // 16, 3))
    bg = np.repeat(np.repeat(coarse, 16, axis=0), 16, axis=1)
    bg += rng.uniform(-0.02, 0.02, size=(size, size, 3))
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


def _object_color(rng, cls):
    base = np.zeros(3)
    base[cls] = 1.0
    jitter = rng.uniform(-0.15, 0.1, size=3)
    color = np.clip(0.55 + 0.45 * base + jitter, 0.0, 1.0)
    return color.astype(np.float32)


def generate_scene(seed: int, size: int = 128, scale_mix=(1 / 3, 1 / 3, 1 / 3),
                   min_objects: int = 1, max_objects: int = 6):
    """Render one scene; same seed gives bit-identical output.

    Returns (image H x W x 3 float32 in [0, 1], SceneAnnotation).
    scale_mix weights the small / medium / large area bands.
    """
    if size % 32:
        raise DataError(f"scene size {size} not divisible by 32")
    if not 0 <= min_objects <= max_objects <= MAX_OBJECTS:
        raise DataError("invalid object count range")
    rng = np.random.default_rng(seed)
    img = _textured_background(rng, size)
    mix = np.asarray(scale_mix, dtype=np.float64)
    mix = mix / mix.sum()

    n = int(rng.integers(min_objects, max_objects + 1))
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    boxes, classes = [], []
    for _ in range(n):
        cls = int(rng.integers(0, len(CLASS_NAMES)))
        band = _BANDS[rng.choice(len(_BANDS), p=mix)]
        area = rng.uniform(*band) * size * size
        aspect = rng.uniform(0.6, 1.6)
        w = np.sqrt(area * aspect)
        h = area / w
        w = float(np.clip(w, 2.0, size - 2.0))
        h = float(np.clip(h, 2.0, size - 2.0))
        placed = False
        for _attempt in range(12):
            cx = rng.uniform(w / 2, size - w / 2)
            cy = rng.uniform(h / 2, size - h / 2)
            ok = True
            for bx in boxes:
                if (abs(cx - bx[0] * size) < (w + bx[2] * size) / 2
                        and abs(cy - bx[1] * size) < (h + bx[3] * size) / 2):
                    ok = False
                    break
            if ok:
                placed = True
                break
        if not placed:
            continue

        x0, x1 = cx - w / 2, cx + w / 2
        y0, y1 = cy - h / 2, cy + h / 2
        if cls == 0:
            mask = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        elif cls == 1:
            rx, ry = w / 2, h / 2
            mask = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        else:
            # apex-up triangle spanning the box
            inside_y = (ys >= y0) & (ys < y1)
            t = np.clip((ys - y0) / max(h, 1e-9), 0.0, 1.0)
            half = (w / 2) * t
            mask = inside_y & (np.abs(xs - cx) <= half)
        color = _object_color(rng, cls)
        img[mask] = color
        boxes.append([cx / size, cy / size, w / size, h / size])
        classes.append(cls)

    ann = SceneAnnotation(boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
                          classes=np.array(classes, dtype=np.intp))
    return img, ann


@dataclass
class Dataset:
    images: list                  # float32 arrays
    annotations: list             # SceneAnnotation
    root: str = ""

    def __len__(self):
        return len(self.images)


def write_dataset(path: str, n: int, seed: int, size: int = 128,
                  scale_mix=(1 / 3, 1 / 3, 1 / 3), min_objects: int = 1,
                  max_objects: int = 6) -> Dataset:
    """Generate n scenes under `path`: raw image blobs plus JSON-lines."""
    os.makedirs(path, exist_ok=True)
    images, annotations = [], []
    lines = []
    for i in range(n):
        img, ann = generate_scene(seed + i, size=size, scale_mix=scale_mix,
                                  min_objects=min_objects, max_objects=max_objects)
        name = f"img_{i:05d}.bin"
        write_blob(os.path.join(path, name), img)
        ann.image = name
        images.append(img)
        annotations.append(ann)
        lines.append(json.dumps({
            "image": name,
            "boxes": [[float(v) for v in b] for b in ann.boxes],
            "classes": [int(c) for c in ann.classes],
        }, sort_keys=True))
    tmp = os.path.join(path, "annotations.jsonl.tmp")
    with open(tmp, "w") as fh:
        for line in lines:
            fh.write(line + "\n")
    os.replace(tmp, os.path.join(path, "annotations.jsonl"))
    return Dataset(images=images, annotations=annotations, root=path)


def read_dataset(path: str) -> Dataset:
    """Load a dataset written by write_dataset; bit-exact round trip."""
    ann_path = os.path.join(path, "annotations.jsonl")
    try:
        with open(ann_path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise DatasetIOError(f"cannot read annotations {ann_path}: {e}") from e
    images, annotations = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            name = rec["image"]
            ann = SceneAnnotation(boxes=rec["boxes"], classes=rec["classes"], image=name)
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"malformed annotation at {ann_path}:{lineno}: {e}") from e
        images.append(read_blob(os.path.join(path, name)))
        annotations.append(ann)
    return Dataset(images=images, annotations=annotations, root=path)
