"""Synthetic linearly separable image sets for toy-scale runs."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .data import write_dataset
from .model import ModelConfig

# Desk-scale configuration: 32 x 32 input, one eighth of the channel widths, two classes.
TOY_CONFIG = ModelConfig(32, 32, 2, Fraction(1, 8))


def toy_images(n_per_class: int = 100, size: int = 32, seed: int = 0) -> dict[str, list[np.ndarray]]:
    """Two classes of uint8 grayscale noise: ``dark`` in [0.05, 0.45], ``light`` in [0.55, 0.95]."""
    rng = np.random.default_rng(seed)
    out = {"dark": [], "light": []}
    for _ in range(n_per_class):
        out["dark"].append((rng.uniform(0.05, 0.45, (size, size)) * 255).astype(np.uint8))
        out["light"].append((rng.uniform(0.55, 0.95, (size, size)) * 255).astype(np.uint8))
    return out


def write_toy_dataset(root, n_per_class: int = 100, size: int = 32, seed: int = 0) -> None:
    write_dataset(root, toy_images(n_per_class, size, seed))
