"""Ordered color-fidelity groups: one reference plus K-1 increasingly distorted variants.

Two synthesis modes:

* ``analytic`` scales HSV saturation by a gain and stretches RMS contrast by
  ``sqrt(gain)``, so fidelity is ordered by construction.
* ``diffusion`` samples the toy model at increasing guidance scales from a
  shared seed.

Groups are written as ``groups/<id>/rank<k>.png`` (8-bit RGB) next to a
``manifest.json``. Ranks come from level order only, never from measured
statistics.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .checkpoint import atomic_write_bytes
from .color_stats import saturation_map
from .palettes import CATEGORIES, PALETTE_HUES, palette_for

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_GAINS = (1.15, 1.3, 1.5, 1.75, 2.0, 2.3)
DEFAULT_SCALES = (7.5, 10.0, 15.0, 20.0, 25.0, 30.0)
DEFAULT_SPLIT = 160.0 / 190.0
SATURATION_BAND = (0.25, 0.41)
# Per-image targets are drawn from this narrower band (mean 0.33).
_TARGET_BAND = (0.27, 0.39)


# reference images

def _hsv_to_rgb_arrays(h, s, v) -> np.ndarray:
    h = np.mod(h, 360.0) / 60.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    return np.take_along_axis(table, i[None, ..., None].repeat(3, -1), 0)[0]


def scale_saturation(img: np.ndarray, gain) -> np.ndarray:
    """Multiply each pixel's HSV saturation by ``gain`` (capped at 1), keeping hue and value.

    ``gain`` may be a scalar or a per-pixel ``(H, W)`` array.
    """
    v = img.max(axis=-1, keepdims=True)
    s = saturation_map(img)[..., None]
    gain = np.asarray(gain, dtype=np.float64)
    if gain.ndim == 2:
        gain = gain[..., None]
    with np.errstate(divide="ignore"):
        cap = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 1.0)
    f = np.minimum(gain, cap)
    return np.clip(v - f * (v - img), 0.0, 1.0)


def stretch_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """Scale deviations from the mean luminance by ``factor`` (pre-clamp RMS contrast x factor)."""
    if np.ptp(img) == 0:
        return img.copy()
    lum = float((img @ np.array([0.299, 0.587, 0.114])).mean())
    return np.clip(lum + factor * (img - lum), 0.0, 1.0)


def make_reference(category: str, seed: int, size: int = 32,
                   categories: Sequence[str] = CATEGORIES) -> np.ndarray:
    """Smooth multi-blob color field in the category's palette with natural saturation."""
    pid = palette_for(category, categories)
    cat_idx = list(categories).index(category)
    rng = np.random.default_rng([int(seed), cat_idx])
    hues = PALETTE_HUES[pid]
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    n_blobs = int(rng.integers(3, 7))
    colors = [_hsv_to_rgb_arrays(np.array(hues[0] + rng.normal(0, 10)),
                                 np.array(rng.uniform(0.1, 0.3)), np.array(rng.uniform(0.5, 0.8)))]
    weights = [np.full((size, size), 0.25)]
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.08, 0.25)
        hue = hues[int(rng.integers(len(hues)))] + rng.normal(0, 8)
        colors.append(_hsv_to_rgb_arrays(np.array(hue), np.array(rng.uniform(0.2, 0.7)),
                                         np.array(rng.uniform(0.45, 0.95))))
        weights.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2)))
    w = np.stack(weights)
    c = np.stack(colors)
    img = np.einsum("khw,kc->hwc", w, c) / w.sum(axis=0)[..., None]
    gy, gx = rng.normal(0, 0.12, 2)
    shade = 1.0 + gy * (yy - 0.5) + gx * (xx - 0.5)
    img = np.clip(img * shade[..., None], 0.0, 1.0)

    target = rng.uniform(*_TARGET_BAND)
    for _ in range(4):
        cur = float(saturation_map(img).mean())
        if cur <= 0 or abs(cur - target) < 1e-6:
            break
        img = scale_saturation(img, target / cur)
    return img


# variants

def synth_variants_analytic(ref: np.ndarray, gains: Sequence[float], seed: int = 0) -> list[np.ndarray]:
    """Saturation gain ``g`` plus contrast stretch ``sqrt(g)`` per level; ``seed`` is unused (deterministic)."""
    gains = [float(g) for g in gains]
    if any(g < 1.0 for g in gains):
        raise ValueError("analytic gains must be >= 1")
    if any(b <= a for a, b in zip(gains, gains[1:])):
        raise ValueError("analytic gains must be strictly increasing")
    ref = np.asarray(ref, dtype=np.float64)
    out = []
    for g in gains:
        if g == 1.0:
            out.append(ref.copy())
            continue
        out.append(stretch_contrast(scale_saturation(ref, g), math.sqrt(g)))
    return out


def synth_variants_diffusion(cond, scales: Sequence[float], seed: int, params) -> list[np.ndarray]:
    """One toy-model sample per guidance scale, all from the same initial noise."""
    from .toy_diffusion import sample

    if params is None:
        raise ValueError("diffusion mode needs a trained denoiser")
    scales = [float(s) for s in scales]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError("guidance scales must be strictly increasing")
    # one call per scale keeps each result independent of the other scales
    return [sample(params, cond, s, seed) for s in scales]


# manifest

@dataclass
class GroupRecord:
    group_id: str
    category: str
    palette_id: int
    split: str
    levels: list[float]
    images: list[str]

    @property
    def ranks(self) -> list[int]:
        return list(range(1, len(self.images) + 1))


@dataclass
class DatasetManifest:
    version: int
    mode: str
    groups: list[GroupRecord] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        return cls(raw["version"], raw["mode"], [GroupRecord(**g) for g in raw["groups"]])

    def write(self, path) -> None:
        atomic_write_bytes(path, self.to_json().encode("utf-8"))

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def split(self, name: str) -> list[GroupRecord]:
        return [g for g in self.groups if g.split == name]


@dataclass
class BuildConfig:
    out_dir: str
    groups: int = 120
    mode: str = "analytic"
    seed: int = 0
    split: float = DEFAULT_SPLIT
    gains: tuple[float, ...] = DEFAULT_GAINS
    scales: tuple[float, ...] = DEFAULT_SCALES
    categories: tuple[str, ...] = CATEGORIES
    image_size: int = 32
    denoiser: str | None = None
    jobs: int = 1


def save_png(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    Image.fromarray(arr, "RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_group_images(root, record: GroupRecord) -> np.ndarray:
    root = Path(root)
    return np.stack([load_png(root / p) for p in record.images])


def _group_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _build_group(args) -> None:
    cfg, index, category, denoiser_path = args
    from .toy_diffusion import Condition, DenoiserParams

    gseed = _group_seed(cfg.seed, index)
    ref = make_reference(category, gseed, cfg.image_size, cfg.categories)
    pid = palette_for(category, cfg.categories)
    if cfg.mode == "analytic":
        variants = synth_variants_analytic(ref, cfg.gains)
    else:
        params = DenoiserParams.load(denoiser_path)
        variants = synth_variants_diffusion(Condition(pid), cfg.scales, gseed, params)
    gid = f"{index:06d}"
    for k, img in enumerate([ref] + variants, start=1):
        save_png(Path(cfg.out_dir) / "groups" / gid / f"rank{k}.png", img)


def build_dataset(cfg: BuildConfig) -> DatasetManifest:
    """Write a category-balanced dataset and its manifest under ``cfg.out_dir``."""
    if cfg.mode not in ("analytic", "diffusion"):
        raise ValueError(f"unknown mode {cfg.mode!r}")
    if cfg.groups < 1:
        raise ValueError("groups must be >= 1")
    if not 0.0 < cfg.split < 1.0:
        raise ValueError("split must lie in (0, 1)")
    if cfg.mode == "diffusion" and not cfg.denoiser:
        raise ValueError("diffusion mode needs a denoiser checkpoint")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")

    cats = list(cfg.categories)
    categories = [cats[i % len(cats)] for i in range(cfg.groups)]
    levels = list(cfg.gains if cfg.mode == "analytic" else cfg.scales)
    n_train = int(round(cfg.split * cfg.groups))
    order = np.random.default_rng(cfg.seed).permutation(cfg.groups)
    splits = ["test"] * cfg.groups
    for i in order[:n_train]:
        splits[int(i)] = "train"

    jobs = [(cfg, i, categories[i], cfg.denoiser) for i in range(cfg.groups)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            list(pool.map(_build_group, jobs, chunksize=8))
    else:
        for job in jobs:
            _build_group(job)

    groups = []
    for i in range(cfg.groups):
        gid = f"{i:06d}"
        images = [f"groups/{gid}/rank{k}.png" for k in range(1, len(levels) + 2)]
        groups.append(GroupRecord(gid, categories[i], palette_for(categories[i], cats), splits[i],
                                  [float(x) for x in levels], images))
    manifest = DatasetManifest(MANIFEST_VERSION, cfg.mode, groups)
    manifest.write(out / "manifest.json")
    log.info("wrote %d groups (%d train) to %s", cfg.groups, n_train, out)
    return manifest


def check_manifest(manifest: DatasetManifest, root) -> list[str]:
    """Paths referenced by the manifest that do not exist."""
    root = Path(root)
    return [p for g in manifest.groups for p in g.images if not (root / p).exists()]
