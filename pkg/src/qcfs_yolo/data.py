"""Synthetic shape scenes and YOLO-format dataset ingestion."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "SHAPE_CLASSES",
    "SyntheticScene",
    "YoloSample",
    "YoloFormatError",
    "generate_synthetic_dataset",
    "stack_scenes",
    "parse_label_line",
    "read_labels",
    "load_yolo_dataset",
    "load_yolo_scenes",
    "write_yolo_dataset",
    "IMAGE_SUFFIXES",
]

SHAPE_CLASSES = ("disc", "rectangle", "triangle")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class SyntheticScene:
    """``image`` is float32 ``(3, H, W)`` in [0, 1]; boxes are pixel xyxy."""

    image: np.ndarray
    boxes: list = field(default_factory=list)  # [(cls, (x1, y1, x2, y2)), ...]


def _shape_mask(kind, x0, y0, w, h, apex, yy, xx):
    if kind == 0:  # disc (ellipse when w != h)
        rx, ry = w / 2, h / 2
        return ((xx - (x0 + rx)) / rx) ** 2 + ((yy - (y0 + ry)) / ry) ** 2 <= 1.0
    if kind == 1:
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    # triangle: apex on the top edge, base on the bottom edge
    ax = x0 + apex * w
    t = (yy - y0) / h  # 0 at apex row, 1 at base
    left = ax + (x0 - ax) * t
    right = ax + (x0 + w - ax) * t
    return (t >= 0) & (t <= 1) & (xx >= left) & (xx <= right)


def _draw_scene(rng, classes, size=64, stride=8):
    # shape extents and the minimum visible area scale with the canvas
    min_side, max_side = 12 * size / 64, 30 * size / 64
    min_area = 20 * (size / 64) ** 2
    bg = rng.uniform(0.15, 0.85)
    tint = rng.uniform(-0.08, 0.08, size=3)
    img = np.clip(bg + tint, 0, 1)[:, None, None] * np.ones((3, size, size))
    # gentle illumination gradient
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    ramp = (np.arange(size) / size - 0.5)
    img = img + gy * ramp[None, :, None] + gx * ramp[None, None, :]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    boxes = []
    cells = set()
    for cls in classes:
        for _ in range(200):
            if cls == 0:
                w = h = rng.uniform(min_side, max_side)
            else:
                w, h = rng.uniform(min_side, max_side, size=2)
            x0 = rng.uniform(0, size - w)
            y0 = rng.uniform(0, size - h)
            apex = rng.uniform(0.1, 0.9)
            mask = _shape_mask(cls, x0, y0, w, h, apex, yy, xx)
            if mask.sum() < min_area:
                continue
            ys, xs = np.nonzero(mask)
            box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            cell = (int((box[0] + box[2]) / 2 // stride), int((box[1] + box[3]) / 2 // stride))
            if cell in cells or any(_overlaps(box, b, margin=2) for _, b in boxes):
                continue
            color = rng.uniform(0, 1, size=3)
            if np.abs(color - img[:, mask].mean(axis=1)).max() < 0.35:
                continue
            img[:, mask] = color[:, None]
            boxes.append((int(cls), box))
            cells.add(cell)
            break
    img = img + rng.normal(0, 0.05, size=img.shape)
    return SyntheticScene(np.clip(img, 0, 1).astype(np.float32), boxes)


def _overlaps(a, b, margin=0.0):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def generate_synthetic_dataset(n: int, seed: int = 0, max_objects: int = 3, size: int = 64):
    """Scenes of discs, rectangles and triangles on noisy backgrounds.

    Object classes are drawn from a shuffled, exactly balanced pool, so class
    shares stay within a few percent of one third (placement failures are
    rare and are the only source of imbalance).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, max_objects + 1, size=n)
    pool = np.resize(np.arange(len(SHAPE_CLASSES)), counts.sum())
    rng.shuffle(pool)
    scenes = []
    start = 0
    for k in counts:
        classes = pool[start:start + k]
        start += k
        scene = _draw_scene(rng, classes, size=size)
        if not scene.boxes:  # always keep at least one object
            scene = _draw_scene(rng, classes[:1], size=size)
        scenes.append(scene)
    return scenes


def stack_scenes(scenes):
    """``(images (N,3,H,W) float32, [boxes per scene])``."""
    images = np.stack([s.image for s in scenes]).astype(np.float32)
    return images, [list(s.boxes) for s in scenes]


# --------------------------------------------------------------------------
# YOLO text format


class YoloFormatError(ValueError):
    pass


@dataclass
class YoloSample:
    image_path: Path
    labels: list = field(default_factory=list)  # [(cls, cx, cy, w, h)] normalized

    def boxes_xyxy(self, width: float, height: float):
        out = []
        for cls, cx, cy, w, h in self.labels:
            out.append((cls, ((cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width, (cy + h / 2) * height)))
        return out


def parse_label_line(line: str, where: str = "<string>"):
    parts = line.split()
    if len(parts) != 5:
        raise YoloFormatError(f"{where}: expected 'class cx cy w h', got {line.strip()!r}")
    try:
        cls = int(parts[0])
        cx, cy, w, h = (float(v) for v in parts[1:])
    except ValueError as exc:
        raise YoloFormatError(f"{where}: {exc}") from None
    if cls < 0 or not all(np.isfinite(v) for v in (cx, cy, w, h)) or w < 0 or h < 0:
        raise YoloFormatError(f"{where}: invalid values in {line.strip()!r}")
    x1, x2 = max(cx - w / 2, 0.0), min(cx + w / 2, 1.0)
    y1, y2 = max(cy - h / 2, 0.0), min(cy + h / 2, 1.0)
    if (x1, x2, y1, y2) != (cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2):
        logger.warning("%s: box extends outside the image; clamped", where)
        cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, max(x2 - x1, 0.0), max(y2 - y1, 0.0)
    return cls, cx, cy, w, h


def read_labels(path: Path):
    path = Path(path)
    if not path.exists():
        logger.warning("missing label file %s; treating image as background", path)
        return []
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                labels.append(parse_label_line(line, f"{path}:{lineno}"))
    return labels


def _collect(image_dir: Path, label_dir: Path):
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if image_dir.is_dir() else []
    return [YoloSample(p, read_labels(label_dir / (p.stem + ".txt"))) for p in files]


def load_yolo_dataset(root, ratios=(0.8, 0.1, 0.1), seed: int = 0, splits=("train", "val", "test")):
    """Load ``root/images`` + ``root/labels`` into ``{split: [YoloSample]}``.

    Pre-split layouts (``images/<split>/``) are honoured as-is.  A flat
    ``images/`` directory is split by a seeded shuffle of the lexicographic
    file list with the given ratios.
    """
    root = Path(root)
    images = root / "images"
    if not images.is_dir():
        raise FileNotFoundError(f"{images} does not exist")
    if any((images / s).is_dir() for s in splits):
        return {s: _collect(images / s, root / "labels" / s) for s in splits}
    samples = _collect(images, root / "labels")
    if len(ratios) != len(splits) or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios {ratios} must be non-negative, one per split, and sum to 1")
    order = np.random.default_rng(seed).permutation(len(samples))
    sizes = [int(round(r * len(samples))) for r in ratios[:-1]]
    sizes.append(len(samples) - sum(sizes))
    out, start = {}, 0
    for name, k in zip(splits, sizes):
        out[name] = [samples[i] for i in sorted(order[start:start + k])]
        start += k
    return out


def load_yolo_scenes(samples, size: int = 64):
    """Decode and resize images into :class:`SyntheticScene` records."""
    from PIL import Image

    scenes = []
    for s in samples:
        with Image.open(s.image_path) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
        scenes.append(SyntheticScene(arr, s.boxes_xyxy(size, size)))
    return scenes


def write_yolo_dataset(scenes, root, split: str | None = None):
    """Write scenes as PNG images plus YOLO label files under ``root``."""
    from PIL import Image

    root = Path(root)
    img_dir = root / "images" / (split or "")
    lab_dir = root / "labels" / (split or "")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    for i, scene in enumerate(scenes):
        _, h, w = scene.image.shape
        stem = f"{i:06d}"
        arr = (np.clip(scene.image, 0, 1).transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / f"{stem}.png")
        with open(lab_dir / f"{stem}.txt", "w") as fh:
            for cls, (x1, y1, x2, y2) in scene.boxes:
                fh.write(f"{cls} {(x1 + x2) / 2 / w:.6f} {(y1 + y2) / 2 / h:.6f} {(x2 - x1) / w:.6f} {(y2 - y1) / h:.6f}\n")
