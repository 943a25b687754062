"""Index-addressed episode sampling.

An episode is a pure function of ``(seed, index)``, so a training run can be
resumed, or prefetched by several workers, without persisting sampler state.
Queries are drawn before supports from the same permutation, so for a fixed
``(seed, index)`` the K-shot support set extends the (K-1)-shot one and the
queries do not depend on K.
"""
from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .data.registry import DatasetRegistry


@dataclass(frozen=True)
class EpisodeSpec:
    k_shot: int = 5
    n_query: int = 1
    seed: int = 0
    n_way: int = 2

    def __post_init__(self):
        if self.k_shot < 1:
            raise ValueError(f"k_shot must be >= 1, got {self.k_shot}")
        if self.n_query < 1:
            raise ValueError(f"n_query must be >= 1, got {self.n_query}")
        if self.n_way != 2:
            raise ValueError("episodes are binary (n_way=2); use multiway_segment for C > 2")


@dataclass(eq=False)
class Episode:
    class_name: str
    support: list          # ImageMaskPairs
    query_images: list    # (H, W, 3) float arrays
    query_truth: list     # (H, W) {0,1} arrays
    index: int = 0
    pair_indices: tuple = ()  # (query idx..., support idx...)

    def tensors(self, dtype=torch.float32):
        """(support images, support masks, query images, query masks) as NCHW/NHW tensors."""
        def img(a):
            return torch.as_tensor(np.ascontiguousarray(a.transpose(2, 0, 1)), dtype=dtype)

        return (torch.stack([img(p.image) for p in self.support]),
                torch.stack([torch.as_tensor(p.mask, dtype=dtype) for p in self.support]),
                torch.stack([img(q) for q in self.query_images]),
                torch.stack([torch.as_tensor(t, dtype=dtype) for t in self.query_truth]))


def _check_classes(registry, classes, spec):
    if not classes:
        raise ValueError("no classes to sample episodes from")
    need = spec.k_shot + spec.n_query
    for name in classes:
        if registry.n_pairs(name) < need:
            raise ValueError(
                f"class {name!r} has {registry.n_pairs(name)} pairs, episode needs {need}")


def _draw(registry, name, spec, rng, index):
    order = rng.permutation(registry.n_pairs(name))
    q_idx = order[:spec.n_query]
    s_idx = order[spec.n_query:spec.n_query + spec.k_shot]
    queries = [registry.pair(name, int(i)) for i in q_idx]
    return Episode(
        class_name=name,
        support=[registry.pair(name, int(i)) for i in s_idx],
        query_images=[q.image for q in queries],
        query_truth=[q.mask for q in queries],
        index=index,
        pair_indices=tuple(int(i) for i in (*q_idx, *s_idx)),
    )


def sample_episode(registry: DatasetRegistry, split_classes, spec: EpisodeSpec, episode_index: int) -> Episode:
    classes = list(split_classes)
    _check_classes(registry, classes, spec)
    rng = np.random.default_rng([spec.seed, episode_index])
    name = classes[int(rng.integers(len(classes)))]
    return _draw(registry, name, spec, rng, episode_index)


def sample_class_episode(registry: DatasetRegistry, class_name: str, spec: EpisodeSpec,
                         episode_index: int) -> Episode:
    """Episode of a fixed class, used for per-class evaluation."""
    _check_classes(registry, [class_name], spec)
    rng = np.random.default_rng([spec.seed, zlib.crc32(class_name.encode()), episode_index])
    return _draw(registry, class_name, spec, rng, episode_index)


def episode_stream(registry, split_classes, spec, n_episodes, start=0, workers=1):
    """Yield episodes ``start .. n_episodes-1`` in index order."""
    classes = list(split_classes)
    if n_episodes > start:
        _check_classes(registry, classes, spec)
    if workers <= 1:
        for i in range(start, n_episodes):
            yield sample_episode(registry, classes, spec, i)
        return
    chunk = 4 * workers
    with ThreadPoolExecutor(workers) as ex:
        for lo in range(start, n_episodes, chunk):
            hi = min(lo + chunk, n_episodes)
            yield from ex.map(lambda i: sample_episode(registry, classes, spec, i), range(lo, hi))
