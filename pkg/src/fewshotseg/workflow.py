"""Labelling novel classes from a handful of supports, and the correct-and-merge loop.

A round looks like: ``auto_label`` a corpus with support set v1, rank the
results with ``mine_hard_cases``, fix the worst masks in an external editor,
then ``merge_support_set`` the corrected pairs into v2 and label again.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data.registry import (SIZE, DatasetError, ImageMaskPair, load_pair, save_image,
                            scan_class_dir, validate_image, write_pair)
from .metrics import iou, threshold_mask
from .model import FewShotSegNet, load_checkpoint, predict
from .plotting import overlay_uint8

INITIAL = "initial"
CORRECTED = "corrected"
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
SUPPORT_FILE = "support.json"


@dataclass(frozen=True)
class SupportSet:
    version: int
    pairs: tuple
    provenance: tuple

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("a support set needs at least one pair")
        if len(self.pairs) != len(self.provenance):
            raise ValueError("every support pair needs a provenance tag")

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def initial(cls, pairs):
        pairs = tuple(pairs)
        return cls(1, pairs, (INITIAL,) * len(pairs))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        items = []
        for k, (pair, tag) in enumerate(zip(self.pairs, self.provenance), start=1):
            write_pair(pair, directory / f"{k}.jpg", directory / f"{k}.png")
            items.append({"file": f"{k}.jpg", "source": pair.source_path, "provenance": tag})
        (directory / SUPPORT_FILE).write_text(json.dumps({"version": self.version, "items": items}, indent=1))
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = directory / SUPPORT_FILE
        if meta.is_file():
            doc = json.loads(meta.read_text())
            pairs, tags = [], []
            for item in doc["items"]:
                img = directory / item["file"]
                pair = load_pair(img, img.with_suffix(".png"))
                pair.source_path = item["source"]
                pairs.append(pair)
                tags.append(item["provenance"])
            return cls(doc["version"], tuple(pairs), tuple(tags))
        refs = scan_class_dir(directory)
        return cls.initial(load_pair(r.image_path, r.mask_path) for r in refs)


@dataclass(frozen=True, eq=False)
class HardCase:
    index: int
    image_ref: str
    predicted_mask: np.ndarray
    score: float


@dataclass
class LabelResult:
    image_ref: str
    probs: np.ndarray
    mask: np.ndarray
    overlay: np.ndarray


def load_image(path) -> np.ndarray:
    """Read a corpus image, apply the size filters and resize to 224x224 floats."""
    with Image.open(path) as im:
        im = im.convert("RGB")
    check = validate_image(*im.size)
    if not check.ok:
        raise DatasetError(check.rule, f"{path}: {im.size[0]}x{im.size[1]}")
    if im.size != (SIZE, SIZE):
        im = im.resize((SIZE, SIZE), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0


def list_corpus(directory):
    return sorted(p for p in Path(directory).iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES and not p.name.endswith((".mask.png", ".overlay.png")))


def auto_label(model, support: SupportSet, corpus, threshold=0.5, out_dir=None):
    """Segment every corpus image using ``support``; no fine-tuning involved.

    ``corpus`` holds image paths or (H,W,3) float arrays. With ``out_dir`` the
    0/255 masks, red overlays and a ``probs.npz`` of raw probabilities are written.
    """
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model)
    if not isinstance(model, FewShotSegNet):
        raise TypeError("model must be a FewShotSegNet or checkpoint path")
    if support is None or len(support) == 0:
        raise ValueError("support set is empty")
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    model.eval()
    results = []
    for i, item in enumerate(corpus):
        if isinstance(item, (str, Path)):
            ref, image = str(item), load_image(item)
        else:
            ref, image = f"corpus-{i}", np.asarray(item, dtype=np.float32)
        probs = predict(model, support.pairs, [image])[0]
        mask = threshold_mask(probs, threshold)
        results.append(LabelResult(ref, probs, mask, overlay_uint8(image, mask)))
    if out_dir is not None:
        write_labels(results, out_dir)
    return results


def _stem(ref, i):
    return Path(ref).stem if ref else f"corpus-{i}"


def write_labels(results, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probs = {}
    with open(out / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "image_path", "mask_path", "foreground_fraction"])
        for i, r in enumerate(results):
            stem = _stem(r.image_ref, i)
            Image.fromarray(r.mask * 255).save(out / f"{stem}.mask.png")
            save_image(r.overlay, out / f"{stem}.overlay.png")
            probs[stem] = r.probs.astype(np.float32)
            w.writerow([i, r.image_ref, f"{stem}.mask.png", float(r.mask.mean())])
    np.savez_compressed(out / "probs.npz", **probs)
    return out


def confidence_margin(probs):
    """Mean distance of the probabilities from 0.5; low means unsure."""
    return float(np.mean(np.abs(np.asarray(probs, dtype=np.float64) - 0.5)))


def mine_hard_cases(predictions, truths=None, n=5, image_refs=None, threshold=0.5):
    """The ``n`` worst predictions: lowest IoU against ``truths`` when given,
    otherwise lowest confidence margin. Ties go to the lower corpus index."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    predictions = list(predictions)
    if truths is not None:
        truths = list(truths)
        if len(truths) != len(predictions):
            raise ValueError(f"{len(truths)} truths for {len(predictions)} predictions")
    refs = list(image_refs) if image_refs is not None else [f"corpus-{i}" for i in range(len(predictions))]
    cases = []
    for i, probs in enumerate(predictions):
        mask = threshold_mask(probs, threshold)
        score = iou(mask, truths[i]) if truths is not None else confidence_margin(probs)
        cases.append(HardCase(i, refs[i], mask, float(score)))
    cases.sort(key=lambda c: (c.score, c.index))
    return cases[:n]


def write_manifest(cases, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rank", "image_path", "score"])
        for rank, c in enumerate(cases, start=1):
            w.writerow([rank, c.image_ref, repr(c.score)])
    return path


def read_manifest(path):
    with open(path, newline="") as f:
        return [(int(r["rank"]), r["image_path"], float(r["score"])) for r in csv.DictReader(f)]


def _check_pair(pair):
    if pair.image.shape != (SIZE, SIZE, 3) or pair.mask.shape != (SIZE, SIZE):
        raise DatasetError("mask-size", f"{pair.source_path}: corrected pair must be {SIZE}x{SIZE}")
    if not np.isin(pair.mask, (0, 1)).all():
        raise DatasetError("mask-binary", f"{pair.source_path}: corrected mask is not binary")
    if not pair.mask.any():
        raise DatasetError("mask-empty", f"{pair.source_path}: corrected mask is empty")


def merge_support_set(old: SupportSet, corrected) -> SupportSet:
    """Next version: old pairs plus corrected ones; a corrected pair replaces any
    old pair with the same source path."""
    corrected = list(corrected)
    if not corrected:
        raise ValueError("no corrected pairs to merge")
    for pair in corrected:
        _check_pair(pair)
    by_path = {p.source_path: p for p in corrected}
    pairs, tags = [], []
    for pair, tag in zip(old.pairs, old.provenance):
        if pair.source_path in by_path:
            continue
        pairs.append(pair)
        tags.append(tag)
    for pair in by_path.values():
        pairs.append(pair)
        tags.append(CORRECTED)
    return SupportSet(old.version + 1, tuple(pairs), tuple(tags))


def load_corrections(corpus_paths, corrected_dir):
    """Pair each corpus image with ``<corrected_dir>/<stem>.png`` when that mask exists."""
    corrected_dir = Path(corrected_dir)
    pairs = []
    for path in corpus_paths:
        path = Path(path)
        mask_path = corrected_dir / f"{path.stem}.png"
        if not mask_path.is_file():
            continue
        pair = load_pair(path, mask_path)
        pair.source_path = str(path)
        pairs.append(pair)
    return pairs


def iterative_round(model, support: SupportSet, corpus_images, corpus_truths, n_hard, image_refs=None):
    """One mine-correct-merge round with ground truth standing in for the human.

    Returns (v2 support, hard cases, IoUs on the hard cases before and after).
    """
    before = auto_label(model, support, corpus_images)
    cases = mine_hard_cases([r.probs for r in before], corpus_truths, n_hard, image_refs)
    refs = image_refs or [f"corpus-{i}" for i in range(len(corpus_images))]
    fixed = [ImageMaskPair(np.asarray(corpus_images[c.index], dtype=np.float32),
                           np.asarray(corpus_truths[c.index], dtype=np.uint8), refs[c.index])
             for c in cases]
    v2 = merge_support_set(support, fixed)
    after = auto_label(model, v2, [corpus_images[c.index] for c in cases])
    ious_before = [c.score for c in cases]
    ious_after = [iou(r.mask, corpus_truths[c.index]) for r, c in zip(after, cases)]
    return v2, cases, ious_before, ious_after
