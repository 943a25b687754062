"""Class-per-directory corpus model: ``<root>/<class>/<k>.jpg`` + ``<k>.png`` masks."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

from .hierarchy import Hierarchy

SIZE = 224
PAIRS_PER_CLASS = 10
MAX_INSTANCES = 10
MASK_THRESHOLD = 127
HIERARCHY_FILE = "hierarchy.json"

_IMAGE_RE = re.compile(r"^(\d+)\.jpg$")


class DatasetError(ValueError):
    """A file violates one of the collection rules; ``rule`` names which."""

    def __init__(self, rule, message):
        super().__init__(f"{rule}: {message}")
        self.rule = rule


class ImageCheck(NamedTuple):
    ok: bool
    rules: tuple = ()

    @property
    def rule(self):
        return self.rules[0] if self.rules else None


def validate_image(width: int, height: int) -> ImageCheck:
    """Aspect ratio within [0.5, 2] and both sides at least 224 px."""
    rules = []
    ratio = width / height
    if ratio > 2 or ratio < 0.5:
        rules.append("aspect-ratio")
    if min(width, height) < SIZE:
        rules.append("min-side")
    return ImageCheck(not rules, tuple(rules))


@dataclass(eq=False)
class ImageMaskPair:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 in {0, 1}
    source_path: str = ""


@dataclass(frozen=True)
class PairRef:
    image_path: Path
    mask_path: Path
    instance_path: Optional[Path] = None


@dataclass
class ClassEntry:
    name: str
    pairs: list = field(default_factory=list)  # list[PairRef]

    @property
    def instance_masks(self):
        return [p.instance_path for p in self.pairs if p.instance_path is not None]


def _resize_pair(image: Image.Image, mask: np.ndarray, source: str) -> ImageMaskPair:
    if image.size != (SIZE, SIZE):
        image = image.resize((SIZE, SIZE), Image.BILINEAR)
    if mask.shape != (SIZE, SIZE):
        mask = np.asarray(Image.fromarray(mask).resize((SIZE, SIZE), Image.NEAREST))
    binary = (mask > MASK_THRESHOLD).astype(np.uint8)
    if not binary.any():
        raise DatasetError("mask-empty", f"{source}: mask has no foreground after resize")
    img = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    return ImageMaskPair(img, binary, source)


def load_pair(image_path, mask_path) -> ImageMaskPair:
    """Read, filter and resize one pair to 224x224 with a {0,1} mask."""
    image_path, mask_path = Path(image_path), Path(mask_path)
    for p in (image_path, mask_path):
        if not p.is_file():
            raise FileNotFoundError(p)
    with Image.open(image_path) as im:
        image = im.convert("RGB")
    check = validate_image(*image.size)
    if not check.ok:
        raise DatasetError(check.rule, f"{image_path}: {image.size[0]}x{image.size[1]}")
    with Image.open(mask_path) as m:
        mask = np.asarray(m.convert("L"))
    if mask.shape != (image.size[1], image.size[0]):
        raise DatasetError("mask-size", f"{mask_path}: mask {mask.shape[::-1]} vs image {image.size}")
    return _resize_pair(image, mask, str(image_path))


def pair_from_arrays(image: np.ndarray, mask: np.ndarray, source="") -> ImageMaskPair:
    """Apply the load rules to in-memory uint8 image (H,W,3) and mask (H,W) arrays.

    ``mask`` is treated as raw 8-bit values, or as {0,1} labels if that is all it holds.
    """
    mask = np.asarray(mask)
    if mask.max(initial=0) <= 1:
        mask = mask.astype(np.uint8) * 255
    h, w = mask.shape
    check = validate_image(w, h)
    if not check.ok:
        raise DatasetError(check.rule, f"{source}: {w}x{h}")
    if image.shape[:2] != mask.shape:
        raise DatasetError("mask-size", f"{source}: mask {mask.shape} vs image {image.shape[:2]}")
    return _resize_pair(Image.fromarray(np.asarray(image, dtype=np.uint8)), mask.astype(np.uint8), source)


def write_pair(pair: ImageMaskPair, image_path, mask_path):
    image_path, mask_path = Path(image_path), Path(mask_path)
    image_path.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(pair.image * 255), 0, 255).astype(np.uint8)
    save_image(img, image_path)
    Image.fromarray((pair.mask > 0).astype(np.uint8) * 255).save(mask_path)
    return image_path, mask_path


def save_image(img: np.ndarray, path):
    path = Path(path)
    kwargs = {"quality": 95} if path.suffix.lower() in (".jpg", ".jpeg") else {}
    Image.fromarray(img).save(path, **kwargs)


def scan_class_dir(class_dir: Path) -> list:
    refs = []
    for p in class_dir.iterdir():
        m = _IMAGE_RE.match(p.name)
        if not m:
            continue
        k = m.group(1)
        inst = class_dir / f"{k}.inst.png"
        refs.append((int(k), PairRef(p, class_dir / f"{k}.png", inst if inst.is_file() else None)))
    return [r for _, r in sorted(refs, key=lambda t: t[0])]


class DatasetRegistry:
    """Classes, their pair files and the hierarchy. Decoded pairs are cached."""

    def __init__(self, classes: dict, hierarchy: Hierarchy, root_path=None):
        seen = set()
        for entry in classes.values():
            for ref in entry.pairs:
                if ref.image_path in seen:
                    raise ValueError(f"duplicate image path {ref.image_path}")
                seen.add(ref.image_path)
        self.classes = dict(sorted(classes.items()))
        self.hierarchy = hierarchy
        self.root_path = Path(root_path) if root_path is not None else None
        self._cache = {}

    @classmethod
    def open(cls, root) -> "DatasetRegistry":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root {root} is not a readable directory")
        classes = {d.name: ClassEntry(d.name, scan_class_dir(d))
                   for d in sorted(root.iterdir()) if d.is_dir()}
        hfile = root / HIERARCHY_FILE
        hierarchy = Hierarchy.load(hfile) if hfile.is_file() else Hierarchy()
        return cls(classes, hierarchy, root)

    def __len__(self):
        return len(self.classes)

    def __contains__(self, name):
        return name in self.classes

    @property
    def names(self):
        return list(self.classes)

    def n_pairs(self, name):
        return len(self.classes[name].pairs)

    def pair(self, name, index) -> ImageMaskPair:
        key = (name, index)
        if key not in self._cache:
            ref = self.classes[name].pairs[index]
            self._cache[key] = load_pair(ref.image_path, ref.mask_path)
        return self._cache[key]

    def subset(self, names):
        sub = DatasetRegistry({n: self.classes[n] for n in names}, self.hierarchy, self.root_path)
        sub._cache = self._cache
        return sub
