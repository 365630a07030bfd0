"""Synthetic referring-segmentation data: colored geometric shapes on a
3x3 grid, templated expressions, and exact (hard-rasterized) masks.

Every emitted sample is unambiguous: exactly one object in the scene
satisfies the expression, which is checked symbolically against the scene
description rather than against rendered pixels.  Objects occupy distinct
grid cells and never overlap.  Generation is deterministic: sample i of a
split derives its RNG from (seed, split, i), so splits are disjoint by
construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .errors import ConfigError, ShapeError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
CELL_NAMES = {
    (0, 0): "top left", (0, 1): "top", (0, 2): "top right",
    (1, 0): "left", (1, 1): "center", (1, 2): "right",
    (2, 0): "bottom left", (2, 1): "bottom", (2, 2): "bottom right",
}
COLOR_RGB = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.15),
}
BACKGROUND = (0.12, 0.12, 0.12)
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    cell: tuple      # (row, col) on the 3x3 grid


@dataclass
class SceneSpec:
    objects: list    # SceneObject; objects[referred] is the target
    referred: int
    text: str


@dataclass
class Sample:
    image: np.ndarray        # H x W x 3 float in [0, 1]
    tokens: np.ndarray       # int ids, length max_len
    gt_mask: np.ndarray      # H x W bool
    text: str
    scene: SceneSpec
    index: int = 0
    split: str = "train"

    meta_fields: tuple = field(default=(), repr=False)

    def metadata(self) -> dict:
        return {
            "id": f"{self.split}-{self.index:06d}",
            "text": self.text,
            "tokens": [int(t) for t in self.tokens],
            "object": {
                "shape": self.scene.objects[self.scene.referred].shape,
                "color": self.scene.objects[self.scene.referred].color,
                "size": self.scene.objects[self.scene.referred].size,
                "cell": list(self.scene.objects[self.scene.referred].cell),
            },
            "distractors": len(self.scene.objects) - 1,
        }


def rasterize(obj: SceneObject, size: int) -> np.ndarray:
    """Hard (non-antialiased) bool mask of one object on a size x size canvas."""
    cell = size / 3.0
    cy = (obj.cell[0] + 0.5) * cell
    cx = (obj.cell[1] + 0.5) * cell
    r = cell * (0.42 if obj.size == "large" else 0.26)
    yy, xx = np.mgrid[0:size, 0:size]
    y = yy + 0.5 - cy
    x = xx + 0.5 - cx
    if obj.shape == "circle":
        return x * x + y * y <= r * r
    if obj.shape == "square":
        return (np.abs(x) <= r) & (np.abs(y) <= r)
    if obj.shape == "triangle":
        # upward isoceles triangle inscribed in the radius-r box
        return (y <= r) & (np.abs(x) <= (y + r) / 2.0)
    raise ConfigError(f"unknown shape {obj.shape!r}")


def render(scene: SceneSpec, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Render the scene; returns (image, mask of the referred object)."""
    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = BACKGROUND
    gt = None
    for i, obj in enumerate(scene.objects):
        m = rasterize(obj, size)
        image[m] = COLOR_RGB[obj.color]
        if i == scene.referred:
            gt = m
    return image, gt


def _matches(expr_kind: str, target: SceneObject, other: SceneObject) -> bool:
    """Does ``other`` satisfy the expression built for ``target``?"""
    if expr_kind == "color_shape":
        return other.color == target.color and other.shape == target.shape
    if expr_kind == "size_color_shape":
        return (other.size == target.size and other.color == target.color
                and other.shape == target.shape)
    if expr_kind == "shape_position":
        return other.shape == target.shape and other.cell == target.cell
    raise ConfigError(f"unknown expression template {expr_kind!r}")


def expression_text(expr_kind: str, obj: SceneObject) -> str:
    if expr_kind == "color_shape":
        return f"{obj.color} {obj.shape}"
    if expr_kind == "size_color_shape":
        return f"{obj.size} {obj.color} {obj.shape}"
    if expr_kind == "shape_position":
        return f"{obj.shape} on the {CELL_NAMES[obj.cell]}"
    raise ConfigError(f"unknown expression template {expr_kind!r}")


def is_unambiguous(scene_objects, referred: int, expr_kind: str) -> bool:
    target = scene_objects[referred]
    for i, obj in enumerate(scene_objects):
        if i != referred and _matches(expr_kind, target, obj):
            return False
    return True


def _sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    if split not in _SPLIT_CODES:
        raise ConfigError(f"unknown split {split!r}")
    return np.random.default_rng(
        np.random.SeedSequence([seed, _SPLIT_CODES[split], index]))


def make_scene(rng: np.random.Generator, max_distractors: int) -> SceneSpec:
    if max_distractors + 1 > 9:
        raise ConfigError(
            f"{max_distractors} distractors do not fit on a 3x3 grid")
    for _ in range(200):
        n = 1 + int(rng.integers(0, max_distractors + 1))
        cells = rng.choice(9, size=n, replace=False)
        objects = [
            SceneObject(
                shape=SHAPES[rng.integers(len(SHAPES))],
                color=COLORS[rng.integers(len(COLORS))],
                size=SIZES[rng.integers(len(SIZES))],
                cell=(int(c) // 3, int(c) % 3),
            )
            for c in cells
        ]
        referred = int(rng.integers(n))
        kind = ("color_shape", "size_color_shape",
                "shape_position")[rng.integers(3)]
        if is_unambiguous(objects, referred, kind):
            return SceneSpec(objects=objects, referred=referred,
                             text=expression_text(kind, objects[referred]))
    raise ConfigError("could not build an unambiguous scene")


def make_sample(seed: int, split: str, index: int, image_size: int,
                max_len: int, max_distractors: int = 2) -> Sample:
    rng = _sample_rng(seed, split, index)
    scene = make_scene(rng, max_distractors)
    image, gt = render(scene, image_size)
    tokens = np.asarray(vocab.encode(scene.text, max_len), dtype=np.int64)
    return Sample(image=image, tokens=tokens, gt_mask=gt, text=scene.text,
                  scene=scene, index=index, split=split)


def generate(seed: int, count: int, split: str, image_size: int,
             max_len: int, max_distractors: int = 2):
    """Deterministic stream of samples for one split."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    for i in range(count):
        yield make_sample(seed, split, i, image_size, max_len, max_distractors)


def downsample_gt(gt_mask: np.ndarray, factor: int = 4) -> np.ndarray:
    """Area-average the mask over factor x factor blocks, threshold at 0.5
    (ties, exactly 0.5, round to 1)."""
    h, w = gt_mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask dims {h}x{w} not divisible by {factor}")
    blocks = gt_mask.astype(np.float64).reshape(
        h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return blocks >= 0.5


def export_dataset(out_dir, seed: int, count: int, split: str,
                   image_size: int, max_len: int, max_distractors: int = 2):
    """Write a split to disk: PNG images/masks plus JSON-lines metadata."""
    from pathlib import Path

    from PIL import Image

    out = Path(out_dir) / split
    out.mkdir(parents=True, exist_ok=True)
    meta_path = out / "samples.jsonl"
    with open(meta_path, "w") as meta:
        for s in generate(seed, count, split, image_size, max_len,
                          max_distractors):
            stem = f"{s.split}-{s.index:06d}"
            Image.fromarray(
                (s.image * 255).round().astype(np.uint8)).save(
                    out / f"{stem}.png")
            Image.fromarray(
                (s.gt_mask.astype(np.uint8) * 255)).save(
                    out / f"{stem}.mask.png")
            meta.write(json.dumps(s.metadata(), sort_keys=True) + "\n")
    vocab.write_vocab_file(Path(out_dir) / "vocab.txt")
    return out
