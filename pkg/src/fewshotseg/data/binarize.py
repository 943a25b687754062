"""Turn multi-class label maps into binary image/mask pairs for one target class."""
from __future__ import annotations

import numpy as np

from .registry import DatasetError, pair_from_arrays, write_pair


def label_vocabulary(labelmaps):
    vocab = set()
    for lm in labelmaps:
        vocab.update(np.unique(lm).tolist())
    return vocab


def binarize_multiclass_dataset(images, labelmaps, target_class, vocabulary=None, name=None):
    """Return ImageMaskPairs marking ``target_class`` as foreground, everything else background.

    Images lacking the class are dropped, and the usual aspect-ratio, min-side,
    resize and empty-mask rules decide what survives. Each pair's
    ``source_path`` is ``"<name>/<index>"`` with the index into the inputs.
    """
    if len(images) != len(labelmaps):
        raise ValueError(f"{len(images)} images but {len(labelmaps)} label maps")
    vocab = set(vocabulary) if vocabulary is not None else label_vocabulary(labelmaps)
    if target_class not in vocab:
        raise ValueError(f"class {target_class!r} is not in the label vocabulary")
    name = name or f"class-{target_class}"
    out = []
    for i, (image, lm) in enumerate(zip(images, labelmaps)):
        lm = np.asarray(lm)
        mask = (lm == target_class).astype(np.uint8)
        if not mask.any():
            continue
        try:
            out.append(pair_from_arrays(np.asarray(image), mask * 255, f"{name}/{i}"))
        except DatasetError:
            continue
    return out


def write_class(pairs, class_dir):
    """Write pairs as ``<k>.jpg``/``<k>.png`` with k starting at 1."""
    for k, pair in enumerate(pairs, start=1):
        write_pair(pair, class_dir / f"{k}.jpg", class_dir / f"{k}.png")
    return class_dir
