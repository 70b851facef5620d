"""Training-free guidance refinement driven by scorer attention.

Pipeline for one ``(condition, seed)``:

1. sample with a constant guidance scale ``s0``;
2. encode the result with the scorer, take text-to-visual attention
   ``softmax(F_t F_v^T / kappa)`` averaged over text tokens, reshape it to
   the patch grid, min-max normalize and bilinearly upsample it to ``a'``;
3. sample again from the same seed with the per-pixel field
   ``s_t(u, v) = s0 * (1 - lam * alpha(t) * a'(u, v))``, ``alpha(t) = 1 - t/T``.

``t`` is the diffusion timestep, which runs from ``T`` at the first (noisiest)
step down to 0. In terms of the sampler's step counter ``k = 0 .. T-1`` this
is ``alpha = k / T``: the field starts at ``s0`` and modulation grows towards
the final, low-noise steps where color is settled.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .cfm_scorer import ScorerParams, encode, export_embeddings, score_images
from .color_stats import REFERENCE_SATURATION, mean_saturation
from .numerics import softmax_rows
from .palettes import palette_distance
from .toy_diffusion import DenoiserParams, sample_batch

MODES = ("baseline", "temporal_only", "spatial_only", "full")
MODE_ALIASES = {"temporal": "temporal_only", "spatial": "spatial_only"}
DEFAULT_KAPPA = 10.0
DEFAULT_LAMBDA = 1.0


def attention(Ft: np.ndarray, Fv: np.ndarray, kappa: float = DEFAULT_KAPPA) -> tuple[np.ndarray, np.ndarray]:
    """Text-to-visual attention ``A`` (N x M) and its text-averaged map ``a`` (M,)."""
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    Ft = np.atleast_2d(np.asarray(Ft, dtype=np.float64))
    Fv = np.atleast_2d(np.asarray(Fv, dtype=np.float64))
    A = softmax_rows(Ft @ Fv.T, temperature=kappa)
    return A, A.mean(axis=0)


def bilinear_upsample(grid: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear resize with corner alignment (corner samples map to corner pixels)."""
    gh, gw = grid.shape

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=int), np.zeros(n_out, dtype=int), np.zeros(n_out)
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
        return lo, lo + 1, pos - lo

    y0, y1, fy = coords(H, gh)
    x0, x1, fx = coords(W, gw)
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def _minmax(x: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64), True
    return (x - lo) / (hi - lo), False


@dataclass
class AttentionMap:
    raw: np.ndarray
    grid: np.ndarray
    normalized_upsampled: np.ndarray
    degenerate: bool


def normalize_upsample(a: np.ndarray, H: int, W: int) -> AttentionMap:
    """Reshape to a square grid, min-max normalize, upsample to ``H x W``.

    The upsampled map is min-max normalized again so that its peak is exactly 1.
    A constant map yields all zeros with ``degenerate=True``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    side = int(round(math.sqrt(a.size)))
    if side * side != a.size:
        raise ValueError(f"attention length {a.size} is not a perfect square")
    grid = a.reshape(side, side)
    norm, degenerate = _minmax(grid)
    if degenerate:
        return AttentionMap(a, grid, np.zeros((H, W)), True)
    up, _ = _minmax(bilinear_upsample(norm, H, W))
    return AttentionMap(a, grid, np.clip(up, 0.0, 1.0), False)


@dataclass
class GuidanceField:
    """``s_t(u, v) = s0 * (1 - lam * alpha(t) * a'(u, v))``.

    ``at`` and ``alpha`` take the sampler step counter ``k`` (0 = noisiest step),
    so ``alpha(k) = 1 - (T - k) / T = k / T``. ``temporal=False`` fixes
    ``alpha = 1``; ``spatial=False`` replaces ``a'`` by 1. ``a_prime`` may
    carry a leading batch axis.
    """

    s0: float
    lam: float
    T: int
    a_prime: np.ndarray
    temporal: bool = True
    spatial: bool = True

    def alpha(self, t: float) -> float:
        return 1.0 - (self.T - t) / self.T if self.temporal else 1.0

    def at(self, t: float) -> np.ndarray:
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        a = self.a_prime if self.spatial else np.ones_like(self.a_prime)
        return self.s0 * (1.0 - self.lam * self.alpha(t) * a)

    def steps(self) -> np.ndarray:
        """Field for every sampler step ``t = 0 .. T-1`` stacked on axis 0."""
        return np.stack([self.at(t) for t in range(self.T)])

    def __call__(self, step: int, _x0=None) -> np.ndarray:
        return self.at(step)


def guidance_field(s0: float, lam: float, T: int, a_prime: np.ndarray,
                   temporal: bool = True, spatial: bool = True) -> GuidanceField:
    if not s0 > 0:
        raise ValueError("s0 must be positive")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if T < 1:
        raise ValueError("T must be >= 1")
    a_prime = np.asarray(a_prime, dtype=np.float64)
    if a_prime.size and (a_prime.min() < 0 or a_prime.max() > 1):
        raise ValueError("a' must lie in [0, 1]")
    return GuidanceField(float(s0), float(lam), int(T), a_prime, temporal, spatial)


def mode_field(mode: str, s0: float, lam: float, T: int, a_prime: np.ndarray) -> GuidanceField:
    mode = MODE_ALIASES.get(mode, mode)
    if mode == "baseline":
        return guidance_field(s0, 0.0, T, a_prime)
    if mode == "temporal_only":
        return guidance_field(s0, lam, T, a_prime, temporal=True, spatial=False)
    if mode == "spatial_only":
        return guidance_field(s0, lam, T, a_prime, temporal=False, spatial=True)
    if mode == "full":
        return guidance_field(s0, lam, T, a_prime)
    raise ValueError(f"invalid mode {mode!r}; expected one of {MODES}")


def attention_maps(images: np.ndarray, conds: Sequence[int], scorer: ScorerParams,
                   kappa: float = DEFAULT_KAPPA) -> list[AttentionMap]:
    maps = []
    for img, c in zip(images, conds):
        Ft, Fv, _ = export_embeddings(encode(img, int(c), scorer))
        _, a = attention(Ft, Fv, kappa)
        maps.append(normalize_upsample(a, img.shape[0], img.shape[1]))
    return maps


@dataclass
class RefineReport:
    mode: str
    s0: float
    lam: float
    kappa: float
    seed: int
    palette_id: int
    sat_before: float
    sat_after: float
    delta_sat_before: float
    delta_sat_after: float
    score_before: float
    score_after: float
    palette_distance_before: float
    palette_distance_after: float
    degenerate_attention: bool


REPORT_COLUMNS = [f.name for f in fields(RefineReport)]


def reports_to_csv(reports: Sequence[RefineReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return buf.getvalue()


@dataclass
class RefineResult:
    before: np.ndarray
    after: np.ndarray
    maps: list[AttentionMap]
    reports: list[RefineReport]


def refine_batch(denoiser: DenoiserParams, scorer: ScorerParams, conds: Sequence[int],
                 seeds: Sequence[int], s0: float, lam: float = DEFAULT_LAMBDA,
                 kappa: float = DEFAULT_KAPPA, mode: str = "full",
                 recompute_every: int | None = None,
                 reference: float = REFERENCE_SATURATION,
                 first_pass: np.ndarray | None = None) -> RefineResult:
    """Two-pass refinement for each ``(cond, seed)``.

    ``first_pass`` lets callers reuse pass-1 images across modes; it must be
    the output of ``sample_batch(denoiser, conds, seeds, s0)``.
    ``recompute_every=k`` re-derives ``a'`` from the running denoised
    estimate every ``k`` steps instead of using the pass-1 image throughout.
    """
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"invalid mode {mode!r}; expected one of {MODES}")
    conds, seeds = list(conds), list(seeds)
    T = denoiser.schedule.T
    before = sample_batch(denoiser, conds, seeds, float(s0)) if first_pass is None else first_pass
    maps = attention_maps(before, conds, scorer, kappa)
    a_prime = np.stack([m.normalized_upsampled for m in maps])
    field = mode_field(mode, s0, lam, T, a_prime)

    if recompute_every and mode in ("spatial_only", "full"):
        state = {"field": field}

        def guidance(step, x0):
            if step > 0 and step % recompute_every == 0 and x0 is not None:
                m = attention_maps(x0, conds, scorer, kappa)
                ap = np.stack([mm.normalized_upsampled for mm in m])
                state["field"] = mode_field(mode, s0, lam, T, ap)
            return state["field"].at(step)

        after = sample_batch(denoiser, conds, seeds, guidance)
    else:
        after = sample_batch(denoiser, conds, seeds, field)

    sb = score_images(before, conds, scorer)
    sa = score_images(after, conds, scorer)
    reports = []
    for i, (c, sd) in enumerate(zip(conds, seeds)):
        mb, ma = mean_saturation(before[i]), mean_saturation(after[i])
        reports.append(RefineReport(
            mode=mode, s0=float(s0), lam=float(lam), kappa=float(kappa), seed=int(sd), palette_id=int(c),
            sat_before=mb, sat_after=ma,
            delta_sat_before=abs(mb - reference), delta_sat_after=abs(ma - reference),
            score_before=float(sb[i]), score_after=float(sa[i]),
            palette_distance_before=palette_distance(before[i], c),
            palette_distance_after=palette_distance(after[i], c),
            degenerate_attention=maps[i].degenerate,
        ))
    return RefineResult(before, after, maps, reports)


def refine(denoiser: DenoiserParams, scorer: ScorerParams, cond, s0: float,
           lam: float = DEFAULT_LAMBDA, kappa: float = DEFAULT_KAPPA, seed: int = 0,
           mode: str = "full", **kw) -> tuple[np.ndarray, RefineReport]:
    pid = cond.palette_id if hasattr(cond, "palette_id") else int(cond)
    res = refine_batch(denoiser, scorer, [pid], [seed], s0, lam, kappa, mode, **kw)
    return res.after[0], res.reports[0]
