"""Synthetic COCO-style scenes: ellipse objects (normal) and rectangles (anomalies).

Scenes are rendered from polygon annotations and run through the regular
extraction path, so they exercise the same masking and centering code as
real data.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .coco import ANOMALY, NORMAL, AnnotationRecord, ObjectPatch, extract_patch, rasterize_polygon

ELLIPSE, RECTANGLE = 1, 2
CATEGORIES = {ELLIPSE: "ellipse", RECTANGLE: "rectangle"}


def ellipse_ring(cx, cy, ax, ay, angle, n=48):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    c, s = math.cos(angle), math.sin(angle)
    x, y = ax * np.cos(t), ay * np.sin(t)
    return np.stack([cx + c * x - s * y, cy + s * x + c * y], axis=1).reshape(-1)


def rectangle_ring(cx, cy, hw, hh, angle):
    c, s = math.cos(angle), math.sin(angle)
    corners = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    rot = corners @ np.array([[c, s], [-s, c]])
    return (rot + [cx, cy]).reshape(-1)


def render_scene(rng: np.random.Generator, category: int, image_size: int = 64):
    """One image with a single shaded object; returns ``(uint8 image, polygon ring)``."""
    n = image_size
    bg = rng.uniform(0.2, 0.8, size=3)
    img = bg + rng.normal(0, 0.05, size=(n, n, 3))
    cx, cy = rng.uniform(0.4 * n, 0.6 * n, size=2)
    angle = rng.uniform(0, np.pi)
    major = rng.uniform(0.22, 0.32) * n
    minor = major * rng.uniform(0.6, 1.0)
    if category == ELLIPSE:
        ring = ellipse_ring(cx, cy, major, minor, angle)
    else:
        ring = rectangle_ring(cx, cy, major * 0.85, minor * 0.85, angle)
    mask = rasterize_polygon([ring], n, n).bits
    color = rng.uniform(0.3, 1.0, size=3)
    yy, xx = np.mgrid[0:n, 0:n]
    shade = 1.0 - 0.35 * (((xx - cx) ** 2 + (yy - cy) ** 2) / (major ** 2))
    obj = np.clip(color * shade[..., None], 0, 1)
    img = np.where(mask[..., None], obj, img)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), ring


def _bbox(ring):
    pts = np.asarray(ring).reshape(-1, 2)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return float(x0), float(y0), float(x1 - x0), float(y1 - y0)


def shape_patches(n_normal: int, n_anomaly: int, patch_size: int = 32, seed: int = 0,
                  image_size: int = 64) -> list[ObjectPatch]:
    """Labeled patches: ``n_normal`` ellipses followed by ``n_anomaly`` rectangles."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_normal + n_anomaly):
        cat = ELLIPSE if i < n_normal else RECTANGLE
        img, ring = render_scene(rng, cat, image_size)
        rec = AnnotationRecord(i + 1, i + 1, cat, (tuple(ring),), _bbox(ring))
        out.append(extract_patch(img, rec, patch_size, label=NORMAL if cat == ELLIPSE else ANOMALY))
    return out


def write_coco_dataset(directory: str | Path, n_normal: int, n_anomaly: int, seed: int = 0,
                       image_size: int = 64, objects_per_image: int = 1) -> Path:
    """Write PNG scenes plus an ``annotations.json`` in COCO layout; returns the annotation path."""
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images, annotations = [], []
    cats = [ELLIPSE] * n_normal + [RECTANGLE] * n_anomaly
    ann_id = 0
    for img_idx in range(0, len(cats), objects_per_image):
        group = cats[img_idx: img_idx + objects_per_image]
        image_id = img_idx // objects_per_image + 1
        canvas = None
        for j, cat in enumerate(group):
            img, ring = render_scene(rng, cat, image_size)
            if canvas is None:
                canvas = np.zeros((image_size, image_size * len(group), 3), dtype=np.uint8)
            canvas[:, j * image_size:(j + 1) * image_size] = img
            ring = np.asarray(ring).reshape(-1, 2) + [j * image_size, 0]
            ring = ring.reshape(-1)
            ann_id += 1
            annotations.append({"id": ann_id, "image_id": image_id, "category_id": cat,
                                "segmentation": [[round(float(v), 3) for v in ring]],
                                "bbox": list(_bbox(ring)), "area": 0.0, "iscrowd": 0})
        name = f"{image_id:06d}.png"
        Image.fromarray(canvas).save(directory / "images" / name)
        images.append({"id": image_id, "file_name": name, "height": canvas.shape[0], "width": canvas.shape[1]})
    doc = {"images": images, "annotations": annotations,
           "categories": [{"id": k, "name": v} for k, v in CATEGORIES.items()]}
    path = directory / "annotations.json"
    path.write_text(json.dumps(doc))
    return path
