"""Random geometric augmentation: rotation, shifts and flips."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg_max: float = 15.0
    shift_frac_max: float = 0.1
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5

    def __post_init__(self):
        if self.rotation_deg_max < 0 or self.shift_frac_max < 0:
            raise ValueError("augmentation magnitudes must be non-negative")
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability {p} outside [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


def geometric_transform(img: np.ndarray, angle_deg: float = 0.0, shift_y: float = 0.0,
                        shift_x: float = 0.0, hflip: bool = False, vflip: bool = False) -> np.ndarray:
    """Flip, rotate about the centre, then translate; nearest-neighbour, zero fill.

    Positive angles rotate the content counter-clockwise as displayed (rows
    pointing down). Positive shifts move the content down / right by that many
    pixels. ``img`` is H x W x C.
    """
    h, w = img.shape[:2]
    if hflip:
        img = img[:, ::-1]
    if vflip:
        img = img[::-1]
    if angle_deg == 0.0 and shift_y == 0.0 and shift_x == 0.0:
        return np.ascontiguousarray(img)
    t = math.radians(angle_deg)
    cos, sin = math.cos(t), math.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = np.arange(h, dtype=np.float64)[:, None] - shift_y - cy
    dx = np.arange(w, dtype=np.float64)[None, :] - shift_x - cx
    sy = np.floor(cos * dy + sin * dx + cy + 0.5).astype(np.int64)
    sx = np.floor(-sin * dy + cos * dx + cx + 0.5).astype(np.int64)
    inside = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = img[np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)]
    out[~inside] = 0
    return out


def augment(img: np.ndarray, config: AugmentConfig, seed) -> np.ndarray:
    """Randomly transform one H x W x C image; fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    h, w = img.shape[:2]
    angle = rng.uniform(-config.rotation_deg_max, config.rotation_deg_max)
    sy = rng.uniform(-config.shift_frac_max, config.shift_frac_max) * h
    sx = rng.uniform(-config.shift_frac_max, config.shift_frac_max) * w
    hflip = rng.random() < config.hflip_prob
    vflip = rng.random() < config.vflip_prob
    return geometric_transform(img, angle, sy, sx, hflip, vflip)
