"""Shared fixtures: a deterministic on-disk image dataset."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

CATEGORIES = ("apple_scab", "pizza")
IMAGES_PER_CATEGORY = 20


def write_image_dataset(
    root: Path,
    categories=CATEGORIES,
    count: int = IMAGES_PER_CATEGORY,
    seed: int = 7,
    side: int = 8,
) -> Path:
    rng = np.random.default_rng(seed)
    for cat in categories:
        cat_dir = root / cat
        cat_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            arr = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
            Image.fromarray(arr, "RGB").save(cat_dir / f"img{i:03d}.png")
    return root


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory) -> Path:
    """2 categories x 20 tiny PNGs, deterministic content."""
    root = tmp_path_factory.mktemp("dataset")
    return write_image_dataset(root)
