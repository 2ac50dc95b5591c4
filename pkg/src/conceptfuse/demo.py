"""The two-concept demo fixture.

Both concepts lie outside the pretraining family, so their identities have
to be carried by the adapters: ``<cat>`` is a bright plus sign in the top
left, ``<dog>`` a thick L-shaped corner in the bottom right.
"""

from __future__ import annotations

import numpy as np

from .tuning import ConceptDataset
from .world import BACKGROUND


def plus_sign(level: float = 1.3, size: int = 8) -> np.ndarray:
    img = np.full((size, size), BACKGROUND)
    img[1, 0:3] = level
    img[0:3, 1] = level
    return img[:, :, None]


def corner(level: float = 0.9, size: int = 8) -> np.ndarray:
    img = np.full((size, size), BACKGROUND)
    img[4:8, 4:6] = level
    img[6:8, 4:8] = level
    return img[:, :, None]


def jittered(template: np.ndarray, count: int, seed: int, scale: float = 0.03) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [template + rng.normal(0.0, scale, template.shape) for _ in range(count)]


def demo_datasets(images: int = 5) -> list[ConceptDataset]:
    return [
        ConceptDataset(jittered(plus_sign(), images, 1), "a photo of <cat>".split(), "<cat>", "square"),
        ConceptDataset(jittered(corner(), images, 2), "a photo of <dog>".split(), "<dog>", "bar"),
    ]
