"""Losses, thresholding and IoU aggregation."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


def _as_tensors(pred, truth):
    if not isinstance(pred, torch.Tensor):
        pred = torch.as_tensor(np.asarray(pred, dtype=np.float64))
    if not isinstance(truth, torch.Tensor):
        truth = torch.as_tensor(np.asarray(truth), dtype=pred.dtype)
    truth = truth.to(pred.dtype)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if not (torch.isfinite(pred).all() and torch.isfinite(truth).all()):
        raise ValueError("non-finite values in loss inputs")
    return pred, truth


def bce_loss(pred, truth):
    """Pixel-mean binary cross entropy. Returns a 0-d tensor (differentiable)."""
    pred, truth = _as_tensors(pred, truth)
    # xlogy keeps 0*log(0) terms at zero for saturated pixels
    return -(torch.xlogy(truth, pred) + torch.xlogy(1 - truth, 1 - pred)).mean()


def mse_loss(pred, truth):
    pred, truth = _as_tensors(pred, truth)
    return ((pred - truth) ** 2).mean()


LOSSES = {"bce": bce_loss, "mse": mse_loss}


def threshold_mask(pred, tau=0.5):
    if not 0 < tau < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    if isinstance(pred, torch.Tensor):
        pred = pred.detach().cpu().numpy()
    return (np.asarray(pred) >= tau).astype(np.uint8)


def iou(pred_mask, truth_mask):
    """IoU of the positive label. Two empty masks agree perfectly (1.0)."""
    a = np.asarray(pred_mask)
    b = np.asarray(truth_mask)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    for m in (a, b):
        if not np.isin(m, (0, 1)).all():
            raise ValueError("iou expects binary masks")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass
class MetricsReport:
    classes: dict  # name -> (n, mean iou)
    superclasses: dict
    global_mean: float
    micro_mean: float
    n: int
    meta: dict = field(default_factory=dict)

    def rows(self):
        for name, (n, v) in sorted(self.classes.items()):
            yield "class", name, n, v
        for name, (n, v) in sorted(self.superclasses.items()):
            yield "superclass", name, n, v
        yield "global", "macro", len(self.classes), self.global_mean
        yield "global", "micro", self.n, self.micro_mean

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["level", "name", "n", "mean_iou"])
            for level, name, n, v in self.rows():
                w.writerow([level, name, n, repr(float(v))])
        return path

    @classmethod
    def from_csv(cls, path):
        classes, supers = {}, {}
        macro = micro = float("nan")
        n_total = 0
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                n, v = int(row["n"]), float(row["mean_iou"])
                if row["level"] == "class":
                    classes[row["name"]] = (n, v)
                elif row["level"] == "superclass":
                    supers[row["name"]] = (n, v)
                elif row["name"] == "macro":
                    macro = v
                else:
                    micro, n_total = v, n
        return cls(classes, supers, macro, micro, n_total)


def mean_iou(records, hierarchy=None, meta=None):
    """Aggregate (class_name, iou) records into class, superclass and global means.

    The global mean is the macro average over classes; ``micro_mean`` averages
    all records directly. Superclass means average their member class means.
    """
    records = list(records)
    if not records:
        raise ValueError("no IoU records to aggregate")
    per_class = defaultdict(list)
    for name, value in records:
        per_class[name].append(float(value))
    classes = {name: (len(v), float(np.mean(v))) for name, v in per_class.items()}

    supers = {}
    if hierarchy is not None:
        members = defaultdict(list)
        for name in classes:
            if name not in hierarchy:
                raise KeyError(f"class {name!r} is not in the hierarchy")
            for top in hierarchy.superclasses(name):
                members[top].append(classes[name][1])
        supers = {top: (len(v), float(np.mean(v))) for top, v in members.items()}

    return MetricsReport(
        classes=classes,
        superclasses=supers,
        global_mean=float(np.mean([v for _, v in classes.values()])),
        micro_mean=float(np.mean([v for _, v in records])),
        n=len(records),
        meta=dict(meta or {}),
    )
