"""Registry validation: every rule violation becomes a report row."""
from __future__ import annotations

import csv
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .hierarchy import EXPECTED_TOP, LEVELS, Hierarchy
from .registry import (HIERARCHY_FILE, MASK_THRESHOLD, MAX_INSTANCES, PAIRS_PER_CLASS, SIZE,
                       scan_class_dir, validate_image)

ERROR = "error"
WARNING = "warning"


@dataclass(frozen=True)
class Finding:
    path: str
    rule_id: str
    severity: str
    message: str


@dataclass
class ValidationReport:
    findings: list = field(default_factory=list)

    @property
    def errors(self):
        return [f for f in self.findings if f.severity == ERROR]

    @property
    def warnings(self):
        return [f for f in self.findings if f.severity == WARNING]

    @property
    def conforms(self):
        return not self.errors

    def rule_ids(self, severity=None):
        return sorted(f.rule_id for f in self.findings if severity is None or f.severity == severity)

    def summary(self):
        return dict(Counter(f.rule_id for f in self.findings))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["path", "rule_id", "severity", "message"])
            for x in self.findings:
                w.writerow([x.path, x.rule_id, x.severity, x.message])
        return path


def _check_pair(ref):
    out = []

    def add(path, rule, msg):
        out.append(Finding(str(path), rule, ERROR, msg))

    try:
        with Image.open(ref.image_path) as im:
            w, h = im.size
    except (OSError, UnidentifiedImageError) as e:
        add(ref.image_path, "unreadable-image", str(e))
        return out
    check = validate_image(w, h)
    for rule in check.rules:
        add(ref.image_path, rule, f"image is {w}x{h}")

    if not ref.mask_path.is_file():
        add(ref.mask_path, "missing-mask", "no mask next to image")
    else:
        try:
            with Image.open(ref.mask_path) as m:
                mask = np.asarray(m.convert("L"))
        except (OSError, UnidentifiedImageError) as e:
            add(ref.mask_path, "unreadable-image", str(e))
            mask = None
        if mask is not None:
            if mask.shape != (h, w):
                add(ref.mask_path, "mask-size", f"mask {mask.shape[1]}x{mask.shape[0]} vs image {w}x{h}")
            values = set(np.unique(mask).tolist())
            if not (values <= {0, 255} or values <= {0, 1}):
                add(ref.mask_path, "mask-binary", f"mask values {sorted(values)[:6]} are not binary")
            scaled = mask if values - {0, 1} else mask * 255
            resized = np.asarray(Image.fromarray(scaled).resize((SIZE, SIZE), Image.NEAREST))
            if not (resized > MASK_THRESHOLD).any():
                add(ref.mask_path, "mask-empty", "no foreground pixels after resize")

    if ref.instance_path is not None:
        with Image.open(ref.instance_path) as m:
            inst = np.asarray(m)
        if inst.ndim != 2:
            add(ref.instance_path, "instance-format", "instance mask must be single channel")
        elif inst.max(initial=0) > MAX_INSTANCES or inst.min(initial=0) < 0:
            add(ref.instance_path, "instance-range",
                f"labels span {int(inst.min())}..{int(inst.max())}, allowed 0..{MAX_INSTANCES}")
    return out


def validate_hierarchy(hierarchy: Hierarchy, class_names, where="hierarchy") -> list:
    out = []

    def add(rule, msg, severity=ERROR):
        out.append(Finding(where, rule, severity, msg))

    for name, level in sorted(hierarchy.levels.items()):
        if level not in LEVELS:
            add("hierarchy-level", f"{name!r} has level {level!r}")
        for p in hierarchy.parents.get(name, ()):
            if p not in hierarchy:
                add("hierarchy-unknown-parent", f"{name!r} lists unknown parent {p!r}")
        if level == "top" and hierarchy.parents.get(name):
            add("hierarchy-level", f"top-level node {name!r} has parents")
    cycle = hierarchy.find_cycle()
    if cycle:
        add("hierarchy-cycle", " -> ".join(cycle))
    n_top = len(hierarchy.top)
    if n_top != EXPECTED_TOP:
        add("hierarchy-top-count", f"{n_top} top-level nodes, expected {EXPECTED_TOP}", WARNING)
    names = set(class_names)
    for name in sorted(names):
        if hierarchy.levels.get(name) != "bottom":
            add("hierarchy-coverage", f"class {name!r} is not a bottom-level node")
        elif not hierarchy.superclasses(name):
            add("hierarchy-coverage", f"class {name!r} does not reach a top-level node")
    for name in hierarchy.bottom:
        if name not in names:
            add("hierarchy-no-data", f"bottom node {name!r} has no class directory", WARNING)
    return out


def validate_registry(root_path, workers=1) -> ValidationReport:
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a readable directory")
    findings = []
    class_dirs = [d for d in sorted(root.iterdir()) if d.is_dir()]
    refs = []
    for d in class_dirs:
        pairs = scan_class_dir(d)
        if len(pairs) != PAIRS_PER_CLASS:
            findings.append(Finding(str(d), "class-cardinality", ERROR,
                                    f"{len(pairs)} pairs, expected {PAIRS_PER_CLASS}"))
        refs.extend(pairs)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            per_pair = list(ex.map(_check_pair, refs))
    else:
        per_pair = [_check_pair(r) for r in refs]
    for f in per_pair:
        findings.extend(f)

    hfile = root / HIERARCHY_FILE
    if not hfile.is_file():
        findings.append(Finding(str(hfile), "hierarchy-missing", ERROR, "no hierarchy file"))
    else:
        try:
            hierarchy = Hierarchy.load(hfile)
        except (ValueError, AttributeError) as e:
            findings.append(Finding(str(hfile), "hierarchy-format", ERROR, str(e)))
        else:
            findings.extend(validate_hierarchy(hierarchy, [d.name for d in class_dirs], str(hfile)))
    return ValidationReport(findings)
