from .binarize import binarize_multiclass_dataset, label_vocabulary, write_class
from .hierarchy import Hierarchy
from .registry import (SIZE, ClassEntry, DatasetError, DatasetRegistry, ImageCheck, ImageMaskPair,
                       PairRef, load_pair, pair_from_arrays, validate_image, write_pair)
from .splits import DatasetStats, SplitSpec, build_splits, compute_stats, holdout_split
from .synthetic import build_synthetic_dataset
from .validation import Finding, ValidationReport, validate_registry

__all__ = [
    "SIZE", "ClassEntry", "DatasetError", "DatasetRegistry", "DatasetStats", "Finding",
    "Hierarchy", "ImageCheck", "ImageMaskPair", "PairRef", "SplitSpec", "ValidationReport",
    "binarize_multiclass_dataset", "build_splits", "build_synthetic_dataset", "compute_stats", "holdout_split",
    "label_vocabulary", "load_pair", "pair_from_arrays", "validate_image", "validate_registry",
    "write_class", "write_pair",
]
