"""Dataset ingestion, letterbox preprocessing, and mosaic augmentation.

Directory layout::

    root/
      images/{split}/<name>.(png|jpg|npy)
      labels/{split}/<name>.txt        # optional; absent = background image

Label files hold one box per line, "class_id cx cy w h", all four
coordinates normalized to [0, 1].  The manifest is a plain key=value text
file declaring ``names`` (comma-separated, index order) and optionally
``root`` (default: the manifest's directory) and the split directory names
``train``/``val``/``test``.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import ShapeError, Tensor


class DatasetError(Exception):
    """Dataset-level failure (layout, manifest, labels)."""


class ManifestError(DatasetError):
    """Manifest file missing, unparseable, or pointing nowhere."""


class LabelFormatError(DatasetError):
    """Malformed label line; message carries file and line number."""


class ClassRangeError(DatasetError):
    """Label class id outside [0, num_classes)."""


class DecodeError(Exception):
    """Image bytes could not be decoded."""


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".npy")
PAD_VALUE = 114.0 / 255.0


def parse_kv_file(path) -> dict:
    """Parse a plain key=value text file; '#' starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class Sample:
    image_path: Path
    label_path: Path
    source_id: str


@dataclass
class LabeledImage:
    """RGB pixels (3,H,W) in [0,1] plus (N,5) [class, cx, cy, w, h] boxes
    normalized to the image's own extent."""

    pixels: np.ndarray
    boxes: np.ndarray
    source_id: str = ""

    @property
    def hw(self):
        return self.pixels.shape[1], self.pixels.shape[2]


@dataclass
class DatasetManifest:
    root: Path
    names: list
    splits: dict = field(default_factory=dict)
    class_counts: np.ndarray = None

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def histogram(self):
        """(name, instance count) pairs in class-index order."""
        return list(zip(self.names, map(int, self.class_counts)))


def read_labels(path, num_classes: int) -> np.ndarray:
    """Parse one label file into (N,5) float64 [class, cx, cy, w, h]."""
    rows = []
    path = Path(path)
    if not path.is_file():
        return np.zeros((0, 5))
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LabelFormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise LabelFormatError(f"{path}:{lineno}: {exc}") from None
        if not 0 <= cls < num_classes:
            raise ClassRangeError(
                f"{path}:{lineno}: class {cls} outside [0, {num_classes})")
        cx, cy, w, h = vals
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise LabelFormatError(f"{path}:{lineno}: center outside [0,1]")
        if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise LabelFormatError(f"{path}:{lineno}: extent must be in (0,1]")
        rows.append([cls, cx, cy, w, h])
    return np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, 5))


def load_image(path) -> np.ndarray:
    """Decode to float32 RGB (3,H,W) in [0,1].

    PNG/JPEG/BMP go through Pillow; ``.npy`` is the raw fallback and accepts
    either uint8 (H,W,3) or float (3,H,W) already in [0,1].
    """
    path = Path(path)
    if path.suffix == ".npy":
        try:
            arr = np.load(path)
        except Exception as exc:
            raise DecodeError(f"{path}: {exc}") from None
        if arr.ndim == 3 and arr.shape[2] == 3 and arr.dtype == np.uint8:
            return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / 255.0
        if arr.ndim == 3 and arr.shape[0] == 3 and np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise DecodeError(f"{path}: float array outside [0,1]")
            return arr
        raise DecodeError(f"{path}: unsupported array layout {arr.dtype} {arr.shape}")
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"{path}: {exc}") from None
    return np.ascontiguousarray(rgb.transpose(2, 0, 1)).astype(np.float32) / 255.0


def load_labeled(sample: Sample, num_classes: int) -> LabeledImage:
    return LabeledImage(load_image(sample.image_path),
                        read_labels(sample.label_path, num_classes),
                        sample.source_id)


def load_dataset(manifest_path) -> DatasetManifest:
    """Read the manifest, enumerate split samples, and count class instances."""
    kv = parse_kv_file(manifest_path)
    known = {"root", "names", "train", "val", "test"}
    unknown = set(kv) - known
    if unknown:
        raise ManifestError(f"{manifest_path}: unknown keys {sorted(unknown)}")
    if "names" not in kv or not kv["names"].strip():
        raise ManifestError(f"{manifest_path}: missing 'names'")
    names = [n.strip() for n in kv["names"].split(",")]
    if any(not n for n in names):
        raise ManifestError(f"{manifest_path}: empty class name in 'names'")
    root = Path(manifest_path).parent / kv.get("root", ".")
    root = root.resolve()
    if not root.is_dir():
        raise ManifestError(f"dataset root not found: {root}")

    manifest = DatasetManifest(root=root, names=names)
    counts = np.zeros(len(names), dtype=np.int64)
    for split in ("train", "val", "test"):
        declared = split in kv
        dirname = kv.get(split, split)
        img_dir = root / "images" / dirname
        if not img_dir.is_dir():
            if declared:
                raise ManifestError(f"split '{split}' images missing: {img_dir}")
            continue
        lbl_dir = root / "labels" / dirname
        samples = []
        for p in sorted(img_dir.iterdir()):
            if p.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            lbl = lbl_dir / (p.stem + ".txt")
            samples.append(Sample(p, lbl, f"{split}/{p.name}"))
            boxes = read_labels(lbl, len(names))
            for c in boxes[:, 0].astype(np.int64):
                counts[c] += 1
        manifest.splits[split] = samples
    if not manifest.splits:
        raise ManifestError(f"no split directories under {root}/images")
    manifest.class_counts = counts
    return manifest


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of (C,H,W) float32; half-pixel-center convention."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[None, :, None]
    wx = (xs - x0).astype(np.float32)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


@dataclass(frozen=True)
class LetterboxTransform:
    """Exact affine map between source coordinates and the padded canvas."""

    src_w: int
    src_h: int
    new_w: int
    new_h: int
    pad_x: int
    pad_y: int
    size: int

    def boxes_to_canvas(self, boxes_norm: np.ndarray) -> np.ndarray:
        """Source-normalized (N,4) cxcywh -> canvas-normalized cxcywh."""
        b = np.asarray(boxes_norm, dtype=np.float64).reshape(-1, 4).copy()
        b[:, 0] = (b[:, 0] * self.new_w + self.pad_x) / self.size
        b[:, 1] = (b[:, 1] * self.new_h + self.pad_y) / self.size
        b[:, 2] = b[:, 2] * self.new_w / self.size
        b[:, 3] = b[:, 3] * self.new_h / self.size
        return b

    def boxes_to_source(self, boxes_norm: np.ndarray) -> np.ndarray:
        """Inverse of boxes_to_canvas (exact affine inverse)."""
        b = np.asarray(boxes_norm, dtype=np.float64).reshape(-1, 4).copy()
        b[:, 0] = (b[:, 0] * self.size - self.pad_x) / self.new_w
        b[:, 1] = (b[:, 1] * self.size - self.pad_y) / self.new_h
        b[:, 2] = b[:, 2] * self.size / self.new_w
        b[:, 3] = b[:, 3] * self.size / self.new_h
        return b

    def corners_to_source_px(self, corners_px: np.ndarray) -> np.ndarray:
        """Canvas-pixel (N,4) x1y1x2y2 -> source-pixel corners."""
        b = np.asarray(corners_px, dtype=np.float64).reshape(-1, 4).copy()
        b[:, (0, 2)] = (b[:, (0, 2)] - self.pad_x) * (self.src_w / self.new_w)
        b[:, (1, 3)] = (b[:, (1, 3)] - self.pad_y) * (self.src_h / self.new_h)
        return b


def letterbox(image: np.ndarray, target_size: int):
    """Aspect-preserving resize plus symmetric gray padding to a square.

    Returns (canvas (3,T,T), LetterboxTransform).  Target must be a multiple
    of 32 to match the detector's stride pyramid.
    """
    if target_size % 32 != 0 or target_size <= 0:
        raise ShapeError(f"letterbox size must be a positive multiple of 32, got {target_size}")
    c, h, w = image.shape
    if h < 1 or w < 1:
        raise ShapeError(f"zero-extent image {image.shape}")
    scale = min(target_size / w, target_size / h)
    new_w = max(1, int(round(w * scale)))
    new_h = max(1, int(round(h * scale)))
    resized = bilinear_resize(image.astype(np.float32), new_h, new_w)
    pad_x = (target_size - new_w) // 2
    pad_y = (target_size - new_h) // 2
    canvas = np.full((c, target_size, target_size), PAD_VALUE, dtype=np.float32)
    canvas[:, pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resized
    tf = LetterboxTransform(w, h, new_w, new_h, pad_x, pad_y, target_size)
    return canvas, tf


def letterbox_labeled(li: LabeledImage, target_size: int) -> LabeledImage:
    canvas, tf = letterbox(li.pixels, target_size)
    boxes = li.boxes.copy()
    if boxes.shape[0]:
        boxes[:, 1:5] = tf.boxes_to_canvas(boxes[:, 1:5])
    return LabeledImage(canvas, boxes, li.source_id)


# Quadrant order: (x0, y0, x1, y1) as functions of the mosaic center; the
# paired flags say whether the crop anchors to the scaled image's right/bottom
# edge (the corner that touches the mosaic center).
def _quadrants(px: int, py: int, s: int):
    return (
        ((0, 0, px, py), True, True),    # top-left keeps its bottom-right crop
        ((px, 0, s, py), False, True),   # top-right keeps its bottom-left crop
        ((0, py, px, s), True, False),   # bottom-left keeps its top-right crop
        ((px, py, s, s), False, False),  # bottom-right keeps its top-left crop
    )


def mosaic(samples, output_size: int, rng: np.random.Generator,
           center=None) -> LabeledImage:
    """Tile four labeled images into the quadrants around a random center.

    Each source is scaled (aspect-preserving) to cover its quadrant and
    cropped from the corner adjacent to the center, so the canvas is covered
    exactly once.  Transformed boxes are clipped to their quadrant; a box is
    dropped when its clipped area falls below 10% of the pre-clip area or
    below 4 px².  ``center`` overrides the uniform [0.25S, 0.75S]² draw.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    s = int(output_size)
    if center is None:
        center = rng.uniform(0.25 * s, 0.75 * s, size=2)
    px = int(round(float(center[0])))
    py = int(round(float(center[1])))
    if not (0 < px < s and 0 < py < s):
        raise ValueError(f"mosaic center {(px, py)} outside (0, {s})²")

    canvas = np.full((3, s, s), PAD_VALUE, dtype=np.float32)
    kept = []
    for li, (rect, from_right, from_bottom) in zip(samples, _quadrants(px, py, s)):
        x0, y0, x1, y1 = rect
        qw, qh = x1 - x0, y1 - y0
        h, w = li.hw
        scale = max(qw / w, qh / h)
        sw = max(qw, int(round(w * scale)))
        sh = max(qh, int(round(h * scale)))
        scaled = bilinear_resize(li.pixels, sh, sw)
        cx0 = sw - qw if from_right else 0
        cy0 = sh - qh if from_bottom else 0
        canvas[:, y0:y1, x0:x1] = scaled[:, cy0 : cy0 + qh, cx0 : cx0 + qw]

        if li.boxes.shape[0] == 0:
            continue
        b = li.boxes.astype(np.float64)
        bx1 = (b[:, 1] - b[:, 3] / 2) * sw - cx0 + x0
        bx2 = (b[:, 1] + b[:, 3] / 2) * sw - cx0 + x0
        by1 = (b[:, 2] - b[:, 4] / 2) * sh - cy0 + y0
        by2 = (b[:, 2] + b[:, 4] / 2) * sh - cy0 + y0
        pre_area = (bx2 - bx1) * (by2 - by1)
        # visible region of this source is exactly its quadrant
        cx1c = np.clip(bx1, x0, x1)
        cx2c = np.clip(bx2, x0, x1)
        cy1c = np.clip(by1, y0, y1)
        cy2c = np.clip(by2, y0, y1)
        area = (cx2c - cx1c) * (cy2c - cy1c)
        keep = (area >= 0.1 * pre_area) & (area >= 4.0)
        for i in np.nonzero(keep)[0]:
            kept.append([
                b[i, 0],
                (cx1c[i] + cx2c[i]) / 2 / s,
                (cy1c[i] + cy2c[i]) / 2 / s,
                (cx2c[i] - cx1c[i]) / s,
                (cy2c[i] - cy1c[i]) / s,
            ])
    boxes = np.asarray(kept, dtype=np.float64) if kept else np.zeros((0, 5))
    source = "mosaic(" + ",".join(li.source_id or "?" for li in samples) + ")"
    return LabeledImage(canvas, boxes, source)


def hflip(li: LabeledImage) -> LabeledImage:
    boxes = li.boxes.copy()
    if boxes.shape[0]:
        boxes[:, 1] = 1.0 - boxes[:, 1]
    return LabeledImage(np.ascontiguousarray(li.pixels[:, :, ::-1]), boxes, li.source_id)


def batch_iterator(manifest: DatasetManifest, split: str, batch_size: int,
                   augment: bool, seed: int, epoch: int = 0,
                   input_size: int = 640, mosaic_prob: float = 1.0,
                   flip_prob: float = 0.5):
    """Yield (Tensor[B,3,S,S], targets) batches in a seeded epoch order.

    Targets are one (class_ids int64, boxes cxcywh in canvas pixels) pair per
    image.  The stream is fully determined by (seed, epoch): the permutation,
    the mosaic partners, and every augmentation draw come from one generator
    seeded with that pair.  The final batch may be short (no drop-last).
    """
    if split not in manifest.splits:
        raise DatasetError(f"unknown split '{split}' (have {sorted(manifest.splits)})")
    samples = manifest.splits[split]
    if not samples:
        raise DatasetError(f"split '{split}' is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    nc = manifest.num_classes
    rng = np.random.default_rng([int(seed), int(epoch)])
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = order[start : start + batch_size]
        images, targets = [], []
        for idx in chunk:
            li = load_labeled(samples[idx], nc)
            if augment:
                if rng.random() < mosaic_prob:
                    partners = rng.integers(0, len(samples), size=3)
                    others = [load_labeled(samples[j], nc) for j in partners]
                    li = mosaic([li, *others], input_size, rng)
                else:
                    li = letterbox_labeled(li, input_size)
                if rng.random() < flip_prob:
                    li = hflip(li)
            else:
                li = letterbox_labeled(li, input_size)
            images.append(li.pixels)
            cls_ids = li.boxes[:, 0].astype(np.int64) if li.boxes.shape[0] else np.zeros(0, np.int64)
            boxes_px = (li.boxes[:, 1:5] * input_size).astype(np.float32) \
                if li.boxes.shape[0] else np.zeros((0, 4), np.float32)
            targets.append((cls_ids, boxes_px))
        yield Tensor(np.stack(images)), targets


def batches_per_epoch(manifest: DatasetManifest, split: str, batch_size: int) -> int:
    n = len(manifest.splits.get(split, ()))
    return (n + batch_size - 1) // batch_size
