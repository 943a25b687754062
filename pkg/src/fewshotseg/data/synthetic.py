"""Synthetic shapes corpus in the class-per-directory on-disk layout.

Each class is a (shape, fill style, colour) combination. Class ``i`` belongs
to superclass ``i % 12`` (fill style x hue band), so superclasses fill evenly
whatever the class count. Every image gets a fresh textured background and a
randomly placed, scaled and rotated instance of the class shape; the mask is
the exact shape footprint.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .hierarchy import Hierarchy
from .registry import HIERARCHY_FILE, PAIRS_PER_CLASS, SIZE, DatasetRegistry, save_image

SHAPES = ("circle", "square", "triangle", "ring", "cross")
FILLS = ("solid", "striped", "checkered", "dotted")
BANDS = ("warm", "cool", "violet")
ROUND_SHAPES = ("circle", "ring")
N_SUPER = len(FILLS) * len(BANDS)


@dataclass(frozen=True)
class ShapeClass:
    index: int
    shape: str
    fill: str
    band: int
    variant: int

    @property
    def superclass(self):
        return f"{self.fill}-{BANDS[self.band]}"

    @property
    def name(self):
        return f"{self.shape}-{self.fill}-{BANDS[self.band]}-{self.variant:02d}"

    @property
    def color(self):
        offset = (self.variant * 0.381966 + 0.15) % 1.0
        hue = (self.band + offset) / len(BANDS)
        return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95))


def shape_class(i: int) -> ShapeClass:
    s, j = i % N_SUPER, i // N_SUPER
    # shape rotates with the superclass too, so small corpora still use every shape
    shape = SHAPES[(j + s) % len(SHAPES)]
    return ShapeClass(i, shape, FILLS[s % len(FILLS)], s // len(FILLS), j // len(SHAPES))


_YY, _XX = np.mgrid[0:SIZE, 0:SIZE].astype(np.float32)
_CHECKER = ((_XX // 8) + (_YY // 8)) % 2 == 1
_DOTS = (_XX % 10 - 4.5) ** 2 + (_YY % 10 - 4.5) ** 2 <= 7


def shape_mask(shape, cx, cy, r, angle):
    dx, dy = _XX - cx, _YY - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if shape == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    if shape == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = 2 * np.pi * k / 3
            # half-plane of the edge facing direction a, apothem r/2
            inside &= np.cos(a) * u + np.sin(a) * v <= 0.5 * r
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def fill_pattern(fill, angle):
    if fill == "solid":
        return np.zeros((SIZE, SIZE), dtype=bool)
    if fill == "striped":
        t = np.cos(angle) * _XX + np.sin(angle) * _YY
        return (t // 6) % 2 == 1
    if fill == "checkered":
        return _CHECKER
    if fill == "dotted":
        return _DOTS
    raise ValueError(f"unknown fill {fill!r}")


def background(rng):
    base = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0, 0.35), rng.uniform(0.3, 0.85)))
    x = np.arange(SIZE, dtype=np.float32)
    waves = []
    for _ in range(3):
        theta, freq, phase = rng.uniform(0, np.pi), rng.uniform(0.02, 0.15), rng.uniform(0, 2 * np.pi)
        a, b = freq * np.cos(theta), freq * np.sin(theta)
        # sin(a*x + b*y + phase) expanded into two separable outer products
        waves.append(np.outer(np.cos(b * x), np.sin(a * x + phase))
                     + np.outer(np.sin(b * x), np.cos(a * x + phase)))
    amps = 0.07 * rng.uniform(0.5, 1.0, size=(3, 3)).astype(np.float32)  # wave x channel
    img = np.tensordot(np.stack(waves, axis=-1), amps, axes=1)
    img += base.astype(np.float32)
    img += 0.03 * rng.standard_normal(size=img.shape, dtype=np.float32)
    return img


def render_object(img, cls: ShapeClass, rng, shade=1.0):
    r = rng.uniform(28, 64)
    cx, cy = rng.uniform(r + 4, SIZE - r - 4, size=2)
    mask = shape_mask(cls.shape, cx, cy, r, rng.uniform(0, 2 * np.pi))
    color = np.clip(cls.color * shade, 0, 1).astype(np.float32)
    pattern = fill_pattern(cls.fill, rng.uniform(0, np.pi))
    layer = np.where(pattern[..., None], 0.45 * color, color)
    img[mask] = layer[mask]
    return mask


def render_sample(cls: ShapeClass, rng, distractors=0, pool=()):
    """One (uint8 image, uint8 0/1 mask) sample of ``cls``."""
    img = background(rng)
    for _ in range(distractors):
        if pool:
            render_object(img, pool[rng.integers(len(pool))], rng)
    mask = render_object(img, cls, rng, shade=rng.uniform(0.9, 1.05))
    img = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return img, mask.astype(np.uint8)


def synthetic_hierarchy(classes) -> Hierarchy:
    h = Hierarchy()
    for cls in classes:
        top = cls.superclass
        if top not in h:
            h.add(top, "top")
        if cls.shape in ROUND_SHAPES:
            middle = f"{top}/round"
            if middle not in h:
                h.add(middle, "middle", [top])
            h.add(cls.name, "bottom", [middle])
        else:
            h.add(cls.name, "bottom", [top])
    return h


def build_synthetic_dataset(n_classes: int, seed: int, out_path, distractors: int = 0) -> DatasetRegistry:
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    classes = [shape_class(i) for i in range(n_classes)]
    for cls in classes:
        rng = np.random.default_rng([seed, cls.index])
        pool = [c for c in classes if c.index != cls.index]
        class_dir = out / cls.name
        class_dir.mkdir(exist_ok=True)
        for k in range(1, PAIRS_PER_CLASS + 1):
            img, mask = render_sample(cls, rng, distractors, pool)
            save_image(img, class_dir / f"{k}.jpg")
            Image.fromarray(mask * 255).save(class_dir / f"{k}.png")
    synthetic_hierarchy(classes).save(out / HIERARCHY_FILE)
    return DatasetRegistry.open(out)
