"""Palette classes used as the discrete condition of the toy models."""

from __future__ import annotations

import numpy as np

from .color_stats import hsv_to_rgb

# Hue anchors (degrees) per palette class.
PALETTE_HUES: tuple[tuple[float, ...], ...] = (
    (0.0, 25.0, 45.0),      # warm reds / oranges
    (100.0, 130.0, 60.0),   # foliage greens
    (200.0, 220.0, 185.0),  # sky / water blues
    (30.0, 40.0, 15.0),     # earth browns
    (280.0, 320.0, 250.0),  # violets / magentas
    (165.0, 140.0, 190.0),  # teals
    (55.0, 75.0, 35.0),     # yellows / olives
    (340.0, 0.0, 210.0),    # crimson with blue accents
)
NUM_PALETTES = len(PALETTE_HUES)

# Saturation / value at which palette anchor colors are rendered.
ANCHOR_SATURATION = 0.4
ANCHOR_VALUE = 0.75

CATEGORIES: tuple[str, ...] = (
    "Human", "Animals", "Plants", "Food", "Vehicles", "Sports", "Architecture",
    "Natural Scene", "Street Scene", "Indoor Scene", "Night Scene", "Others",
)


def palette_for(category: str, categories=CATEGORIES) -> int:
    if category not in categories:
        raise ValueError(f"unknown category {category!r}")
    return list(categories).index(category) % NUM_PALETTES


def anchor_colors(palette_id: int) -> np.ndarray:
    if not 0 <= palette_id < NUM_PALETTES:
        raise ValueError(f"palette id {palette_id} outside [0, {NUM_PALETTES})")
    return np.array([hsv_to_rgb(h, ANCHOR_SATURATION, ANCHOR_VALUE) for h in PALETTE_HUES[palette_id]])


def palette_distance(img: np.ndarray, palette_id: int) -> float:
    """Mean RGB distance from each pixel to its nearest palette anchor color.

    Used as a cheap proxy for how well an image still follows its condition.
    """
    anchors = anchor_colors(palette_id)
    px = np.asarray(img, dtype=np.float64).reshape(-1, 3)
    d = np.linalg.norm(px[:, None, :] - anchors[None, :, :], axis=-1)
    return float(d.min(axis=1).mean())
