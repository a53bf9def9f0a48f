"""COCO-style annotation parsing, mask decoding and masked object patches.

Coordinates follow the COCO convention: pixel ``(row, col)`` covers
``[col, col + 1) x [row, row + 1)`` so its center is ``(col + .5, row + .5)``.
RLE counts are column-major and start with a background run.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ExtractionError, ParseError, ReferentialIntegrityError, ValidationError

NORMAL, ANOMALY, UNLABELED = "normal", "anomaly", "unlabeled"
LABELS = (NORMAL, ANOMALY, UNLABELED)


@dataclass(frozen=True)
class RLE:
    counts: tuple[int, ...]
    size: tuple[int, int]  # (height, width)


@dataclass(frozen=True)
class AnnotationRecord:
    annotation_id: int
    image_id: int
    category_id: int
    segmentation: tuple[tuple[float, ...], ...] | RLE
    bbox: tuple[float, float, float, float]
    iscrowd: bool = False

    def __post_init__(self):
        if not (self.bbox[2] > 0 and self.bbox[3] > 0):
            raise ValidationError(f"annotation {self.annotation_id}: bbox width and height must be positive")
        if isinstance(self.segmentation, RLE):
            h, w = self.segmentation.size
            if sum(self.segmentation.counts) != h * w:
                raise ValidationError(f"annotation {self.annotation_id}: RLE counts do not sum to {h}x{w}")
        else:
            for ring in self.segmentation:
                if len(ring) < 6 or len(ring) % 2:
                    raise ValidationError(f"annotation {self.annotation_id}: polygon ring needs >= 3 vertices")


@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    file_name: str
    height: int
    width: int


@dataclass
class CocoIndex:
    images: dict[int, ImageInfo]
    categories: dict[int, str]
    records: list[AnnotationRecord]

    def category_id(self, name: str) -> int:
        for cid, cname in self.categories.items():
            if cname == name:
                return cid
        raise ValidationError(f"unknown category {name!r}")


@dataclass
class MaskBitmap:
    bits: np.ndarray  # bool [height, width]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@dataclass
class ObjectPatch:
    patch_id: str
    pixels: np.ndarray  # float [S, S, 3] in [0, 1]
    category_id: int
    source: tuple[int, int]  # (image_id, annotation_id)
    label: str = UNLABELED
    mask: np.ndarray | None = None  # bool [S, S]; pixels outside it are exactly 0

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class AugmentationPolicy:
    max_rotation_deg: float = 5.0
    max_shift_frac: float = 0.01
    max_brightness_frac: float = 0.10
    zoom_range: tuple[float, float] = (1.0, 1.25)
    horizontal_flip: bool = True
    seed: int = 0
    flip_prob: float = 0.5

    def __post_init__(self):
        if min(self.max_rotation_deg, self.max_shift_frac, self.max_brightness_frac, *self.zoom_range) < 0:
            raise ValidationError("augmentation ranges must be non-negative")
        if self.zoom_range[0] > self.zoom_range[1]:
            raise ValidationError("zoom_range lower bound exceeds upper bound")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError("flip_prob must lie in [0, 1]")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), False, seed)


@dataclass
class DatasetSplit:
    train: list[ObjectPatch]
    validation: list[ObjectPatch]
    split_fraction: float = 0.85
    seed: int = 0


# ---------------------------------------------------------------- parsing

def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def _parse_segmentation(seg, ann_id):
    if isinstance(seg, dict):
        counts = seg.get("counts")
        if isinstance(counts, str):
            raise ValidationError(f"annotation {ann_id}: compressed string RLE is not supported")
        return RLE(tuple(int(c) for c in counts), (int(seg["size"][0]), int(seg["size"][1])))
    if isinstance(seg, list):
        return tuple(tuple(float(v) for v in ring) for ring in seg)
    raise ValidationError(f"annotation {ann_id}: unrecognized segmentation")


def load_coco(file_bytes: bytes) -> CocoIndex:
    """Parse a COCO annotation document into an index of images, categories and records."""
    try:
        text = file_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("annotation file is not UTF-8", offset=exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed annotation document: {exc.msg}", offset=_byte_offset(text, exc.pos)) from None
    if not isinstance(doc, dict) or not all(isinstance(doc.get(k), list) for k in ("images", "annotations")):
        raise ParseError("annotation document needs top-level 'images' and 'annotations' arrays", offset=0)

    images = {}
    for im in doc["images"]:
        images[int(im["id"])] = ImageInfo(int(im["id"]), im.get("file_name", ""),
                                          int(im.get("height", 0)), int(im.get("width", 0)))
    categories = {int(c["id"]): c.get("name", str(c["id"])) for c in doc.get("categories", [])}

    records = []
    for ann in doc["annotations"]:
        ann_id, image_id = int(ann["id"]), int(ann["image_id"])
        if image_id not in images:
            raise ReferentialIntegrityError(f"annotation {ann_id} references missing image_id {image_id}")
        records.append(AnnotationRecord(
            annotation_id=ann_id,
            image_id=image_id,
            category_id=int(ann["category_id"]),
            segmentation=_parse_segmentation(ann["segmentation"], ann_id),
            bbox=tuple(float(v) for v in ann["bbox"]),
            iscrowd=bool(ann.get("iscrowd", 0)),
        ))
    return CocoIndex(images, categories, records)


def parse_annotations(file_bytes: bytes) -> list[AnnotationRecord]:
    return load_coco(file_bytes).records


# ---------------------------------------------------------------- masks

def _inside_even_odd(xs: np.ndarray, ys: np.ndarray, ring: np.ndarray) -> np.ndarray:
    inside = np.zeros(np.broadcast_shapes(xs.shape, ys.shape), dtype=bool)
    px, py = ring[:, 0], ring[:, 1]
    qx, qy = np.roll(px, -1), np.roll(py, -1)
    for x0, y0, x1, y1 in zip(px, py, qx, qy):
        if y0 == y1:
            continue
        straddles = (y0 > ys) != (y1 > ys)
        x_cross = (x1 - x0) * (ys - y0) / (y1 - y0) + x0
        inside ^= straddles & (xs < x_cross)
    return inside


def rasterize_polygon(rings: Sequence[Sequence[float]], height: int, width: int) -> MaskBitmap:
    """Set every pixel whose center lies inside a ring (even-odd rule); rings are OR-combined."""
    if not rings:
        raise ValidationError("polygon segmentation has no rings")
    bits = np.zeros((height, width), dtype=bool)
    for ring in rings:
        pts = np.asarray(ring, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            raise ValidationError(f"polygon ring has {len(pts)} vertices, needs at least 3")
        c0 = max(int(math.floor(pts[:, 0].min())), 0)
        c1 = min(int(math.ceil(pts[:, 0].max())), width)
        r0 = max(int(math.floor(pts[:, 1].min())), 0)
        r1 = min(int(math.ceil(pts[:, 1].max())), height)
        if c0 >= c1 or r0 >= r1:
            continue
        xs = np.arange(c0, c1, dtype=np.float64)[None, :] + 0.5
        ys = np.arange(r0, r1, dtype=np.float64)[:, None] + 0.5
        bits[r0:r1, c0:c1] |= _inside_even_odd(xs, ys, pts)
    return MaskBitmap(bits)


def decode_rle(counts: Sequence[int], height: int, width: int) -> MaskBitmap:
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 0) or counts.sum() != height * width:
        raise ValidationError(f"RLE counts sum to {int(counts.sum())}, expected {height * width}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return MaskBitmap(flat.reshape(width, height).T.copy())


def encode_rle(mask: MaskBitmap | np.ndarray) -> list[int]:
    bits = mask.bits if isinstance(mask, MaskBitmap) else np.asarray(mask, dtype=bool)
    flat = bits.T.reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    return [0] + runs if flat[0] else runs


def record_mask(record: AnnotationRecord, height: int, width: int) -> MaskBitmap:
    if isinstance(record.segmentation, RLE):
        rh, rw = record.segmentation.size
        m = decode_rle(record.segmentation.counts, rh, rw)
        if (rh, rw) != (height, width):
            bits = np.zeros((height, width), dtype=bool)
            h, w = min(rh, height), min(rw, width)
            bits[:h, :w] = m.bits[:h, :w]
            m = MaskBitmap(bits)
        return m
    return rasterize_polygon(record.segmentation, height, width)


# ---------------------------------------------------------------- resampling

def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img[H, W, ...]`` at fractional pixel-index coordinates, zero outside the image."""
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy, fx = ys - y0, xs - x0
    out = np.zeros(ys.shape + img.shape[2:], dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wy * wx > 0)
            wgt = np.where(ok, wy * wx, 0.0)
            vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            if img.ndim == 3:
                wgt = wgt[..., None]
            out += wgt * vals
    return out


def _resample(pixels: np.ndarray, mask: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    # masked pixels are zero outside the mask, so wherever the resampled mask is 0
    # every contributing neighbour was background and the colour is exactly 0
    new_mask = bilinear_sample(mask.astype(np.float64), ys, xs) > 0
    new_pixels = bilinear_sample(pixels, ys, xs) * new_mask[..., None]
    return np.clip(new_pixels, 0.0, 1.0), new_mask


def mask_centroid(bits: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(bits)
    return float(rows.mean()), float(cols.mean())


def extract_patch(image: np.ndarray, record: AnnotationRecord, patch_size: int = 32,
                  label: str = UNLABELED, min_area: int = 1) -> ObjectPatch:
    """Crop one object, center it on its mask centroid, zero the background, resize to ``patch_size``.

    ``image`` is ``[H, W, 3]``, either uint8 or floats in [0, 1].
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ExtractionError(f"expected an RGB image, got shape {image.shape}")
    img = image.astype(np.float64) / 255.0 if image.dtype == np.uint8 else image.astype(np.float64)
    h, w = img.shape[:2]
    bits = record_mask(record, h, w).bits
    area = int(bits.sum())
    if area == 0:
        x, y, bw, bh = record.bbox
        if x >= w or y >= h or x + bw <= 0 or y + bh <= 0:
            raise ExtractionError(f"annotation {record.annotation_id}: mask lies entirely outside the image")
        raise ExtractionError(f"annotation {record.annotation_id}: empty mask")
    if area < min_area:
        raise ExtractionError(f"annotation {record.annotation_id}: mask area {area} below minimum {min_area}")

    rows, cols = np.nonzero(bits)
    cy, cx = rows.mean(), cols.mean()
    half = max(cy - rows.min(), rows.max() - cy, cx - cols.min(), cols.max() - cx) + 0.5
    step = 2.0 * half / patch_size
    grid = (np.arange(patch_size) + 0.5) * step - half
    ys = cy + grid[:, None] + np.zeros((1, patch_size))
    xs = cx + grid[None, :] + np.zeros((patch_size, 1))

    masked = img * bits[..., None]
    pixels, mask = _resample(masked, bits, ys, xs)
    return ObjectPatch(
        patch_id=f"img{record.image_id}_ann{record.annotation_id}",
        pixels=pixels,
        category_id=record.category_id,
        source=(record.image_id, record.annotation_id),
        label=label,
        mask=mask,
    )


# ---------------------------------------------------------------- augmentation

def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def augmentation_rng(policy: AugmentationPolicy, patch_id: str, draw_index: int) -> np.random.Generator:
    return np.random.default_rng([policy.seed, _stable_hash(patch_id), draw_index])


def augment(patch: ObjectPatch, policy: AugmentationPolicy, draw_index: int) -> ObjectPatch:
    """One random draw of rotation, shift, brightness, zoom and horizontal flip.

    Draws depend only on ``(policy.seed, patch.patch_id, draw_index)``. The
    three geometric steps are composed into a single bilinear resample.
    """
    rng = augmentation_rng(policy, patch.patch_id, draw_index)
    angle = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg)
    shift_y, shift_x = rng.uniform(-policy.max_shift_frac, policy.max_shift_frac, size=2)
    brightness = rng.uniform(1.0 - policy.max_brightness_frac, 1.0 + policy.max_brightness_frac)
    zoom = rng.uniform(*policy.zoom_range)
    flip = policy.horizontal_flip and rng.uniform() < policy.flip_prob

    s = patch.size
    pixels = patch.pixels.astype(np.float64)
    mask = patch.mask if patch.mask is not None else np.any(pixels > 0, axis=-1)

    if angle != 0.0 or shift_x != 0.0 or shift_y != 0.0 or zoom != 1.0:
        # output offset q from the center maps back to source offset R^T (q / zoom - shift)
        c = (s - 1) / 2.0
        qy, qx = np.meshgrid(np.arange(s) - c, np.arange(s) - c, indexing="ij")
        vy, vx = qy / zoom - shift_y * s, qx / zoom - shift_x * s
        t = math.radians(angle)
        cos, sin = math.cos(t), math.sin(t)
        src_x = cos * vx + sin * vy + c
        src_y = -sin * vx + cos * vy + c
        pixels, mask = _resample(pixels, mask, src_y, src_x)
    if brightness != 1.0:
        pixels = np.clip(pixels * brightness, 0.0, 1.0)
    if flip:
        pixels, mask = pixels[:, ::-1], mask[:, ::-1]
    return replace(patch, pixels=np.ascontiguousarray(pixels), mask=np.ascontiguousarray(mask))


# ---------------------------------------------------------------- splitting

def make_split(patches: Sequence[ObjectPatch], fraction: float = 0.85, seed: int = 0) -> DatasetSplit:
    """Shuffle source images and assign ``round(fraction * n_images)`` of them to training.

    All patches cut from one image land on the same side.
    """
    if not patches:
        raise ValidationError("cannot split an empty patch list")
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"split fraction must lie in (0, 1), got {fraction}")
    image_ids = sorted({p.source[0] for p in patches})
    order = np.random.default_rng(seed).permutation(len(image_ids))
    n_train = int(math.floor(fraction * len(image_ids) + 0.5))
    train_images = {image_ids[i] for i in order[:n_train]}
    train = [p for p in patches if p.source[0] in train_images]
    validation = [p for p in patches if p.source[0] not in train_images]
    return DatasetSplit(train, validation, fraction, seed)


# ---------------------------------------------------------------- patch store

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("patch_id", "category_id", "image_id", "annotation_id", "label")


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_patch_store(patches: Iterable[ObjectPatch], directory: str | Path) -> Path:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / MANIFEST_NAME
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for p in patches:
            arr = np.round(np.clip(p.pixels, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(arr).save(directory / f"{p.patch_id}.png")
            writer.writerow([p.patch_id, p.category_id, p.source[0], p.source[1], p.label])
    return manifest


def load_patch_store(directory: str | Path) -> list[ObjectPatch]:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(manifest)
    patches = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            pixels = load_image(directory / f"{row['patch_id']}.png").astype(np.float64) / 255.0
            patches.append(ObjectPatch(
                patch_id=row["patch_id"],
                pixels=pixels,
                category_id=int(row["category_id"]),
                source=(int(row["image_id"]), int(row["annotation_id"])),
                label=row["label"],
                mask=np.any(pixels > 0, axis=-1),
            ))
    return patches


def stack_pixels(patches: Sequence[ObjectPatch], dtype=np.float32) -> np.ndarray:
    return np.stack([p.pixels for p in patches]).astype(dtype)
