import json
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from fewshotseg.data import Hierarchy, ImageMaskPair, build_synthetic_dataset
from fewshotseg.model import ModelConfig, init_params

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def square_mask(size=224, lo=60, hi=150):
    m = np.zeros((size, size), dtype=np.uint8)
    m[lo:hi, lo:hi] = 1
    return m


def write_fixture_pair(class_dir, k, size=(224, 224), mask=None, seed=0):
    """A noisy RGB image with a centred square foreground, written as <k>.jpg/<k>.png."""
    w, h = size
    rng = np.random.default_rng(seed)
    class_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)).save(class_dir / f"{k}.jpg")
    if mask is None:
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[h // 4: 3 * h // 4, w // 4: 3 * w // 4] = 255
    Image.fromarray(mask).save(class_dir / f"{k}.png")


def write_fixture_registry(root, names=("alpha", "beta", "gamma"), n_pairs=10):
    """Conforming registry: every class has 10 pairs and the hierarchy has 12 tops."""
    root = Path(root)
    h = Hierarchy()
    for t in range(12):
        h.add(f"top{t:02d}", "top")
    h.add("top00/mid", "middle", ["top00"])
    for i, name in enumerate(names):
        parents = ["top00/mid"] if i == 0 else [f"top{i:02d}"]
        h.add(name, "bottom", parents)
        for k in range(1, n_pairs + 1):
            write_fixture_pair(root / name, k, seed=100 * i + k)
    h.save(root / "hierarchy.json")
    return root


def rewrite_hierarchy(root, edit):
    path = Path(root) / "hierarchy.json"
    doc = json.loads(path.read_text())
    edit(doc)
    path.write_text(json.dumps(doc))


@pytest.fixture
def fixture_root(tmp_path):
    return write_fixture_registry(tmp_path / "fss")


@pytest.fixture(scope="session")
def synth30(tmp_path_factory):
    """The 30-class shapes corpus (seed 7) shared by the slower tests."""
    from fewshotseg.data import DatasetRegistry
    root = tmp_path_factory.mktemp("synth30")
    build_synthetic_dataset(30, 7, root)
    return DatasetRegistry.open(root)


@pytest.fixture(scope="session")
def synth1000(tmp_path_factory):
    from fewshotseg.data import DatasetRegistry
    root = tmp_path_factory.mktemp("synth1000")
    build_synthetic_dataset(1000, 0, root)
    return DatasetRegistry.open(root)


TINY = ModelConfig(n_stages=2, base_channels=4, convs_per_stage=1)


@pytest.fixture
def tiny_model():
    return init_params(TINY, 0)


def random_pair(rng, size=224, source=""):
    img = rng.random((size, size, 3), dtype=np.float32)
    mask = np.zeros((size, size), dtype=np.uint8)
    y, x = rng.integers(0, size // 2, 2)
    s = int(rng.integers(size // 8, size // 2))
    mask[y:y + s, x:x + s] = 1
    return ImageMaskPair(img, mask, source)


def to_batch(pairs, dtype=torch.float32):
    imgs = torch.stack([torch.as_tensor(p.image.transpose(2, 0, 1).copy(), dtype=dtype) for p in pairs])
    masks = torch.stack([torch.as_tensor(p.mask, dtype=dtype) for p in pairs])
    return imgs, masks
