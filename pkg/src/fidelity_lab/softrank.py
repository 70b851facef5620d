"""Differentiable ordinal objective over groups of K scored images.

Rank 1 is the highest-fidelity image (the reference); a higher score should
mean a better (smaller) rank. Pairwise probabilities are
``P[i, j] = sigmoid((r[j] - r[i]) / tau)``, i.e. the probability that ``j``
outranks ``i``, and the soft rank of ``i`` is ``1 + sum_{j != i} P[i, j]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import GradTape, Tensor, as_tensor, sigmoid, softplus

DEFAULT_TAU = 0.1


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")


def pairwise_probs(r, tau: float = DEFAULT_TAU) -> np.ndarray:
    _check_tau(tau)
    r = np.asarray(r, dtype=np.float64)
    return sigmoid((r[..., None, :] - r[..., :, None]) / tau)


def soft_ranks(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    K = P.shape[-1]
    off = 1.0 - np.eye(K)
    return 1.0 + (P * off).sum(axis=-1)


def soft_ranks_tensor(r: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Soft ranks along the last axis of ``r`` (shape ``(..., K)``), on the tape."""
    _check_tau(tau)
    K = r.shape[-1]
    diff = r.reshape(r.shape[:-1] + (1, K)) - r.reshape(r.shape + (1,))
    P = sigmoid(diff * (1.0 / tau))
    return 1.0 + (P * (1.0 - np.eye(K))).sum(axis=-1)


def softrank_loss_tensor(r: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Mean over groups of ``(1/K) sum_i (Rhat_i - i)^2``; ``r`` is ``(K,)`` or ``(B, K)``."""
    K = r.shape[-1]
    gt = np.arange(1, K + 1, dtype=np.float64)
    err = soft_ranks_tensor(r, tau) - gt
    return (err * err).mean()


def pairwise_loss_tensor(r: Tensor) -> Tensor:
    """Logistic loss ``log(1 + exp(-(r_i - r_{i+1})))`` over adjacent-rank pairs."""
    margin = r[..., :-1] - r[..., 1:]
    return softplus(-margin).mean()


@dataclass
class ScoreGroup:
    scores: np.ndarray
    tau: float = DEFAULT_TAU
    gt_ranks: np.ndarray = field(init=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.size < 2:
            raise ValueError("a score group needs K >= 2")
        _check_tau(self.tau)
        self.gt_ranks = np.arange(1, self.scores.size + 1, dtype=np.float64)


def softrank_loss(group: ScoreGroup) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to the scores."""
    r = Tensor(group.scores, requires_grad=True)
    with GradTape() as tape:
        loss = softrank_loss_tensor(r, group.tau)
    (grad,) = tape.gradient(loss, [r])
    return loss.item(), grad


def softrank_loss_value(scores, tau: float = DEFAULT_TAU) -> float:
    return softrank_loss_tensor(as_tensor(np.asarray(scores, dtype=np.float64)), tau).item()
