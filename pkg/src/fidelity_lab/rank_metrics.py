"""Pairwise discrimination accuracy and rank correlations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ScoredPair:
    """A pair where ``preferred_score`` belongs to the higher-fidelity item."""

    preferred_score: float
    other_score: float


def pair_accuracy(pairs: Sequence[ScoredPair]) -> float:
    """Fraction of pairs ordered correctly. Exact ties count as failures."""
    if len(pairs) == 0:
        raise ValueError("pair_accuracy needs at least one pair")
    hits = sum(1 for p in pairs if p.preferred_score > p.other_score)
    return hits / len(pairs)


def _vectors(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    return x, y


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x, y) -> float:
    x, y = _vectors(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson is undefined for a zero-variance input")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def spearman(x, y) -> float:
    x, y = _vectors(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def kendall_tau_b(x, y) -> float:
    """Tau-b: ``(C - D) / sqrt((C + D + Tx)(C + D + Ty))``.

    ``Tx`` counts pairs tied only in x, ``Ty`` pairs tied only in y.
    """
    x, y = _vectors(x, y)
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, k=1)
    dx, dy = dx[iu], dy[iu]
    prod = dx * dy
    concordant = int(np.sum(prod > 0))
    discordant = int(np.sum(prod < 0))
    tx = int(np.sum((dx == 0) & (dy != 0)))
    ty = int(np.sum((dy == 0) & (dx != 0)))
    denom = (concordant + discordant + tx) * (concordant + discordant + ty)
    if denom == 0:
        raise ValueError("kendall_tau_b is undefined when a vector is fully tied")
    return (concordant - discordant) / np.sqrt(denom)
