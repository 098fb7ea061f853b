"""Synthetic rectangle dataset for smoke tests and overfit runs.

Each image is a dark noisy background with solid axis-aligned rectangles
whose fill color identifies the class, so a detector can overfit a handful
of images quickly.  Files are written in the standard layout consumed by
``data.load_dataset``.
"""

from pathlib import Path

import numpy as np
from PIL import Image

# distinct saturated fills, one per class (cycled if num_classes > 8)
PALETTE = np.array([
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.15),
    (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.15, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.60, 0.60, 0.60),
], dtype=np.float32)


def draw_sample(rng: np.random.Generator, image_size: int, num_classes: int,
                max_boxes: int = 1):
    """One (pixels (3,S,S), boxes (N,5)) sample with non-overlapping boxes."""
    s = image_size
    img = np.full((3, s, s), 0.12, dtype=np.float32)
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    boxes = []
    n = int(rng.integers(1, max_boxes + 1))
    for _ in range(n):
        cls = int(rng.integers(0, num_classes))
        w = float(rng.uniform(0.25, 0.5))
        h = float(rng.uniform(0.25, 0.5))
        cx = float(rng.uniform(w / 2 + 0.02, 1.0 - w / 2 - 0.02))
        cy = float(rng.uniform(h / 2 + 0.02, 1.0 - h / 2 - 0.02))
        x1, y1 = int(round((cx - w / 2) * s)), int(round((cy - h / 2) * s))
        x2, y2 = int(round((cx + w / 2) * s)), int(round((cy + h / 2) * s))
        cand = (x1, y1, x2, y2)
        if any(not (cand[2] <= b[0] or b[2] <= cand[0] or cand[3] <= b[1] or b[3] <= cand[1])
               for b in (px for _, px in boxes)):
            continue
        img[:, y1:y2, x1:x2] = PALETTE[cls % len(PALETTE)][:, None, None]
        # store the box exactly as rasterized so labels match pixels
        boxes.append(([cls, (x1 + x2) / 2 / s, (y1 + y2) / 2 / s,
                       (x2 - x1) / s, (y2 - y1) / s], cand))
    rows = np.asarray([r for r, _ in boxes], dtype=np.float64)
    return img, rows


def save_png(pixels: np.ndarray, path) -> None:
    arr = np.clip(pixels * 255.0, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path)


def make_toy_dataset(root, num_images: int = 8, num_classes: int = 4,
                     image_size: int = 320, max_boxes: int = 1, seed: int = 0,
                     val_mirror: bool = True, fmt: str = "png") -> Path:
    """Write a complete toy dataset; returns the manifest path.

    With ``val_mirror`` the val split holds byte-identical copies of the
    train samples, which suits overfit experiments that validate on the
    training images.  ``fmt`` may be "png" or "npy" (raw float fallback).
    """
    root = Path(root)
    splits = ["train"] + (["val"] if val_mirror else [])
    for split in splits:
        (root / "images" / split).mkdir(parents=True, exist_ok=True)
        (root / "labels" / split).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    for i in range(num_images):
        pixels, rows = draw_sample(rng, image_size, num_classes, max_boxes)
        stem = f"img_{i:03d}"
        lines = "".join(
            f"{int(r[0])} {r[1]:.6f} {r[2]:.6f} {r[3]:.6f} {r[4]:.6f}\n" for r in rows)
        for split in splits:
            img_path = root / "images" / split / f"{stem}.{fmt}"
            if fmt == "npy":
                np.save(img_path, pixels)
            else:
                save_png(pixels, img_path)
            (root / "labels" / split / f"{stem}.txt").write_text(lines)

    names = ", ".join(f"toy_{i}" for i in range(num_classes))
    manifest = root / "manifest.txt"
    lines = [f"names = {names}", "root = .", "train = train"]
    if val_mirror:
        lines.append("val = val")
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
