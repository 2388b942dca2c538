"""Shared builders for tests."""

from __future__ import annotations

import numpy as np
import pytest

from tsdet.annotations import (
    Annotation,
    BoundingBox,
    ClassCatalog,
    Dataset,
    ImageRecord,
)


def make_catalog(names=("player", "referee", "ball")) -> ClassCatalog:
    return ClassCatalog.from_names(list(names))


def make_image(image_id=1, game_id="g0", width=128, height=128) -> ImageRecord:
    return ImageRecord(image_id, f"img_{image_id:05d}.ras", width, height, game_id)


def make_box(x=10.0, y=10.0, w=8.0, h=8.0) -> BoundingBox:
    return BoundingBox(x, y, w, h)


def q6(v: float) -> float:
    """Quantize to the manifest's 6-decimal serialization grid."""
    return round(float(v), 6)


def random_dataset(rng: np.random.Generator, kind: str = "labeled", n_images: int = 4,
                   max_anns: int = 6, n_games: int = 2) -> Dataset:
    catalog = make_catalog()
    images = tuple(
        make_image(i + 1, game_id=f"g{rng.integers(n_games)}")
        for i in range(n_images)
    )
    anns = []
    ann_id = 1
    for im in images:
        for _ in range(rng.integers(0, max_anns + 1)):
            w = q6(rng.uniform(2, 30))
            h = q6(rng.uniform(2, 30))
            x = q6(rng.uniform(0, im.width - w))
            y = q6(rng.uniform(0, im.height - h))
            score = q6(rng.uniform(0, 1)) if kind in ("pseudo", "detections") else None
            anns.append(Annotation(
                ann_id=ann_id, image_id=im.image_id,
                class_id=int(rng.integers(1, len(catalog) + 1)),
                box=BoundingBox(x, y, w, h), score=score,
            ))
            ann_id += 1
    return Dataset(kind, catalog, images, tuple(anns))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(11)
