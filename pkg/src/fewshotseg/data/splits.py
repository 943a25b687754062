"""Class-disjoint train/val/test splits and per-class statistics."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .registry import DatasetRegistry

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    train: tuple
    val: tuple
    test: tuple
    seed: int

    def classes(self, split):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return list(getattr(self, split))

    def save(self, path):
        path = Path(path)
        lines = [f"# seed={self.seed}"]
        for split in SPLITS:
            lines += [f"{split}\t{name}" for name in getattr(self, split)]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path):
        seed = -1
        parts = {s: [] for s in SPLITS}
        for line in Path(path).read_text().splitlines():
            if line.startswith("# seed="):
                seed = int(line.split("=", 1)[1])
            elif line.strip() and not line.startswith("#"):
                split, name = line.split("\t", 1)
                if split not in parts:
                    raise ValueError(f"unknown split {split!r} in {path}")
                parts[split].append(name)
        return cls(tuple(parts["train"]), tuple(parts["val"]), tuple(parts["test"]), seed)

    @staticmethod
    def filename(seed):
        return f"splits-{seed}.txt"


def build_splits(registry: DatasetRegistry, per_super_val: int, per_super_test: int,
                 seed: int) -> SplitSpec:
    """Per superclass, draw ``per_super_val`` then ``per_super_test`` classes; the rest train.

    Classes with several top-level ancestors count toward the lexicographically
    first one only.
    """
    groups = defaultdict(list)
    for name in registry.names:
        if name not in registry.hierarchy:
            raise ValueError(f"class {name!r} is missing from the hierarchy")
        groups[registry.hierarchy.primary_superclass(name)].append(name)

    rng = np.random.default_rng(seed)
    val, test = [], []
    need = per_super_val + per_super_test
    for top in sorted(groups):
        members = sorted(groups[top])
        if len(members) < need:
            raise ValueError(
                f"superclass {top!r} has {len(members)} classes, needs {need} for val+test")
        order = rng.permutation(len(members))
        val += [members[i] for i in order[:per_super_val]]
        test += [members[i] for i in order[per_super_val:need]]
    held = set(val) | set(test)
    train = [n for n in registry.names if n not in held]
    return SplitSpec(tuple(train), tuple(sorted(val)), tuple(sorted(test)), seed)


def holdout_split(registry: DatasetRegistry, n_test: int, n_val: int = 0, seed: int = 0) -> SplitSpec:
    """Flat split ignoring the hierarchy: ``n_val`` and ``n_test`` classes drawn at random."""
    names = registry.names
    if n_val + n_test >= len(names):
        raise ValueError(f"cannot hold out {n_val + n_test} of {len(names)} classes")
    order = np.random.default_rng(seed).permutation(len(names))
    val = sorted(names[i] for i in order[:n_val])
    test = sorted(names[i] for i in order[n_val:n_val + n_test])
    held = set(val) | set(test)
    return SplitSpec(tuple(n for n in names if n not in held), tuple(val), tuple(test), seed)


@dataclass
class DatasetStats:
    counts: dict
    mean: float
    std: float
    distribution: dict  # superclass -> share of images, sums to 1


def compute_stats(registry: DatasetRegistry) -> DatasetStats:
    if len(registry) == 0:
        raise ValueError("registry has no classes")
    counts = {name: registry.n_pairs(name) for name in registry.names}
    values = np.array(list(counts.values()), dtype=float)
    per_super = Counter()
    for name, n in counts.items():
        if name in registry.hierarchy and registry.hierarchy.superclasses(name):
            per_super[registry.hierarchy.primary_superclass(name)] += n
        else:
            per_super["(unassigned)"] += n
    total = sum(per_super.values())
    if total:
        distribution = {k: v / total for k, v in sorted(per_super.items())}
    else:
        distribution = {k: 1 / len(per_super) for k in sorted(per_super)}
    return DatasetStats(counts, float(values.mean()), float(values.std(ddof=0)), distribution)
