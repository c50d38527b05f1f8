import os
from pathlib import Path

import numpy as np
import pytest
import torch

from haystack import nmnist

DATA = Path(__file__).parent / "data"

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

HEAVY = os.environ.get("HAYSTACK_HEAVY") == "1"


def pytest_collection_modifyitems(config, items):
    if HEAVY:
        return
    skip = pytest.mark.skip(reason="heavy desk-scale run; set HAYSTACK_HEAVY=1")
    for item in items:
        if "heavy" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def digit_pool() -> nmnist.DigitPool:
    """600 real MNIST digits (60 per class) split 400/100/100."""
    return nmnist.load_pool(DATA, {"train": 400, "val": 100, "test": 100}, seed=0)


def blob_digits(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.zeros((n, 28, 28), np.uint8)
    for i in range(n):
        r, c = rng.integers(4, 24, size=2)
        out[i, r - 3:r + 3, c - 3:c + 3] = rng.integers(100, 256)
    return out


@pytest.fixture
def small_pool() -> nmnist.DigitPool:
    """10 targets + 90 clutter per split, synthetic blobs."""
    return nmnist.DigitPool(
        targets={s: blob_digits(10, i) for i, s in enumerate(("train", "val", "test"))},
        clutter={s: blob_digits(90, 10 + i) for i, s in enumerate(("train", "val", "test"))},
    )
