"""Synthetic sign-like image generator for desk-scale training runs.

Each class is a fixed (shape, color) template: a filled disk, square,
triangle, diamond, or ring in one of ten saturated colors, drawn over a
noisy dark background with random position/size jitter and pixel noise.
The classes are clearly separable so a few CPU epochs suffice to show an
end-to-end learning signal; this is scaffolding for correctness checks,
not a stand-in for a real traffic-sign corpus.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .augmix import rng_for_sample
from .data import Sample, save_manifest, save_ppm
from .errors import ConfigError

PALETTE = (
    (0.85, 0.10, 0.10),
    (0.10, 0.45, 0.90),
    (0.95, 0.85, 0.10),
    (0.10, 0.75, 0.25),
    (0.90, 0.45, 0.05),
    (0.60, 0.15, 0.80),
    (0.95, 0.95, 0.95),
    (0.05, 0.85, 0.85),
    (0.95, 0.40, 0.70),
    (0.45, 0.30, 0.10),
)

SHAPES = ("disk", "square", "triangle", "diamond", "ring")


def _shape_mask(shape: str, side: int, cx: float, cy: float, r: float) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(side, dtype=np.float64),
                         np.arange(side, dtype=np.float64), indexing="ij")
    dx = xs - cx
    dy = ys - cy
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r * 0.85
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r * 1.15
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.45 * r) ** 2)
    if shape == "triangle":
        return (dy <= r * 0.9) & (np.abs(dx) <= (r * 0.9 - dy) * 0.75)
    raise ConfigError(f"unknown shape {shape!r}")


def render_sign(class_id: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, side, side) image in [0, 1] for the given class template."""
    color = PALETTE[class_id % len(PALETTE)]
    shape = SHAPES[class_id % len(SHAPES)]
    base = rng.uniform(0.08, 0.30)
    img = np.empty((3, side, side))
    for c in range(3):
        img[c] = base + rng.uniform(-0.04, 0.04)
    cx = (side - 1) / 2.0 + rng.uniform(-0.08, 0.08) * side
    cy = (side - 1) / 2.0 + rng.uniform(-0.08, 0.08) * side
    r = rng.uniform(0.30, 0.42) * side
    mask = _shape_mask(shape, side, cx, cy, r)
    for c in range(3):
        img[c][mask] = color[c]
    img += rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_images(count: int, classes: int, side: int, seed: int,
                    offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Render `count` images round-robin over classes; deterministic in seed."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if classes > len(PALETTE) * len(SHAPES):
        raise ConfigError(
            f"at most {len(PALETTE) * len(SHAPES)} distinct classes supported"
        )
    images = np.empty((count, 3, side, side))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = i % classes
        images[i] = render_sign(label, side, rng_for_sample(seed, offset + i))
        labels[i] = label
    return images, labels


def generate_dataset(root, train_count: int, eval_count: int, classes: int,
                     side: int, seed: int) -> tuple[Path, Path]:
    """Write PPM images plus train/eval manifests under `root`.

    Returns the two manifest paths. Eval images use a disjoint stream of
    per-sample seeds from the training images.
    """
    root = Path(root)
    specs = (("train", train_count, 0), ("eval", eval_count, train_count))
    manifests = []
    for split, count, offset in specs:
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        images, labels = generate_images(count, classes, side, seed, offset)
        samples = []
        for i in range(count):
            img_path = split_dir / f"{i:05d}.ppm"
            save_ppm(img_path, images[i])
            samples.append(Sample(img_path.resolve(), int(labels[i])))
        manifest_path = root / f"{split}.csv"
        save_manifest(manifest_path, samples)
        manifests.append(manifest_path)
    return manifests[0], manifests[1]
