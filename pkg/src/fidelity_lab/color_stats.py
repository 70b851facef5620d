"""Photometric statistics used to diagnose color fidelity.

Images are ``(H, W, 3)`` float arrays with channel values in ``[0, 1]``.
Saturation is the HSV hexcone saturation ``(max - min) / max`` (0 at black),
contrast is the population standard deviation of Rec. 601 luminance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

REFERENCE_SATURATION = 0.33
HIST_BINS = 32
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have at least one pixel")
    if img.size and (img.min() < 0.0 or img.max() > 1.0 or not np.all(np.isfinite(img))):
        raise ValueError("image values must lie in [0, 1]")
    return img


def rgb_to_hsv(r: float, g: float, b: float) -> tuple[float, float, float]:
    """Hexcone HSV. Hue in degrees ``[0, 360)``; hue is 0 for achromatic input."""
    for c in (r, g, b):
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"channel value {c} outside [0, 1]")
    mx, mn = max(r, g, b), min(r, g, b)
    delta = mx - mn
    v = mx
    s = 0.0 if mx == 0 else delta / mx
    if delta == 0:
        h = 0.0
    elif mx == r:
        h = 60.0 * (((g - b) / delta) % 6.0)
    elif mx == g:
        h = 60.0 * ((b - r) / delta + 2.0)
    else:
        h = 60.0 * ((r - g) / delta + 4.0)
    if h >= 360.0:
        h -= 360.0
    return h, s, v


def hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    h = (h % 360.0) / 60.0
    i = int(np.floor(h)) % 6
    f = h - np.floor(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def saturation_map(img: np.ndarray) -> np.ndarray:
    """Per-pixel HSV saturation of an ``(..., 3)`` array."""
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1.0), 0.0)
    return s


def luminance(img: np.ndarray) -> np.ndarray:
    return img @ LUMA_WEIGHTS


@dataclass(frozen=True)
class ColorStats:
    mean_saturation: float
    rms_contrast: float
    saturation_histogram: np.ndarray

    def as_row(self) -> dict[str, float]:
        return {"mean_saturation": self.mean_saturation, "rms_contrast": self.rms_contrast}


def compute_stats(img: np.ndarray) -> ColorStats:
    img = validate_image(img)
    sat = saturation_map(img)
    hist, _ = np.histogram(sat, bins=HIST_BINS, range=(0.0, 1.0))
    luma = luminance(img).reshape(-1)
    # shifting by one sample keeps the value exact (zero) on flat images
    luma = luma - luma[0]
    return ColorStats(
        mean_saturation=float(sat.mean()),
        rms_contrast=float(luma.std()),
        saturation_histogram=hist,
    )


def mean_saturation(img: np.ndarray) -> float:
    return float(saturation_map(np.asarray(img, dtype=np.float64)).mean())


def delta_sat(images: Iterable[np.ndarray], reference: float = REFERENCE_SATURATION) -> float:
    """Absolute gap between the pooled pixel saturation of ``images`` and ``reference``."""
    total, count = 0.0, 0
    for img in images:
        sat = saturation_map(np.asarray(img, dtype=np.float64))
        total += float(sat.sum())
        count += sat.size
    if count == 0:
        raise ValueError("delta_sat needs at least one image")
    return abs(total / count - reference)
