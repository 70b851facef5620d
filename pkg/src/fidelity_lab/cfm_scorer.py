"""Color fidelity scorer: joint image/condition token encoder with a reward-token readout.

An image is cut into ``p x p`` patches (64 visual tokens for 32x32, p=4),
followed by text tokens ``[condition, reward]`` (just ``[reward]`` for the
visual-only ablation). Two pre-norm self-attention blocks mix the whole
sequence; an MLP head maps every token to a logit and the logit at the
reward token is the fidelity score. Higher means more natural color.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .numerics import SGD, Adam, GradTape, Tensor, concat, layer_norm, silu, softmax_rows
from .palettes import NUM_PALETTES
from .softrank import DEFAULT_TAU, pairwise_loss_tensor, softrank_loss_tensor

log = logging.getLogger(__name__)

MAGIC = b"CFMS"


@dataclass
class ScorerConfig:
    image_size: int = 32
    patch: int = 4
    dim: int = 32
    heads: int = 4
    blocks: int = 2
    head_hidden: int = 32
    num_classes: int = NUM_PALETTES
    visual_only: bool = False

    @property
    def num_visual(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def num_text(self) -> int:
        return 1 if self.visual_only else 2


@dataclass
class ScorerParams:
    config: ScorerConfig
    weights: dict[str, np.ndarray]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.weights.items()}

    def to_arrays(self) -> dict[str, np.ndarray]:
        c = self.config
        arrays = dict(self.weights)
        arrays["config"] = np.array([c.image_size, c.patch, c.dim, c.heads, c.blocks,
                                     c.head_hidden, c.num_classes, float(c.visual_only)],
                                    dtype=np.float64)
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ScorerParams":
        arrays = dict(arrays)
        v = [int(x) for x in arrays.pop("config")]
        cfg = ScorerConfig(*v[:7], visual_only=bool(v[7]))
        return cls(cfg, arrays)

    def save(self, path) -> None:
        checkpoint.save(path, MAGIC, self.to_arrays())

    @classmethod
    def load(cls, path) -> "ScorerParams":
        return cls.from_arrays(checkpoint.load(path, MAGIC))


def init_scorer(config: ScorerConfig | None = None, seed: int = 0, zero_head: bool = False,
                head_out_gain: float = 0.0) -> ScorerParams:
    """Random scorer weights.

    The head's output layer starts at ``head_out_gain`` times the usual scale
    (zero by default), so initial scores carry no content-dependent offsets
    that a shift-invariant group loss would never remove.
    """
    c = config or ScorerConfig()
    rng = np.random.default_rng(seed)
    d = c.dim
    pin = c.patch * c.patch * 3

    def dense(n_in, n_out, gain=1.0):
        return rng.standard_normal((n_in, n_out)) * (gain / math.sqrt(n_in))

    w = {
        "patch_w": dense(pin, d),
        "patch_b": np.zeros(d),
        "pos": rng.standard_normal((c.num_visual, d)) * 0.02,
        "cond_emb": rng.standard_normal((c.num_classes, d)) * 0.02,
        "reward_emb": rng.standard_normal(d) * 0.02,
    }
    for b in range(c.blocks):
        w.update({
            f"b{b}.ln1_g": np.ones(d), f"b{b}.ln1_b": np.zeros(d),
            f"b{b}.wq": dense(d, d), f"b{b}.wk": dense(d, d), f"b{b}.wv": dense(d, d),
            f"b{b}.wo": dense(d, d, 0.5),
            f"b{b}.ln2_g": np.ones(d), f"b{b}.ln2_b": np.zeros(d),
            f"b{b}.w1": dense(d, 4 * d), f"b{b}.b1": np.zeros(4 * d),
            f"b{b}.w2": dense(4 * d, d, 0.5), f"b{b}.b2": np.zeros(d),
        })
    w.update({
        "head_ln_g": np.ones(d), "head_ln_b": np.zeros(d),
        "head_w1": np.zeros((d, c.head_hidden)) if zero_head else dense(d, c.head_hidden),
        "head_b1": np.zeros(c.head_hidden),
        "head_w2": np.zeros((c.head_hidden, 1)) if zero_head else dense(c.head_hidden, 1, head_out_gain),
        "head_b2": np.zeros(1),
    })
    return ScorerParams(c, w)


@dataclass
class TokenSequence:
    visual: np.ndarray  # (M, d)
    text: np.ndarray    # (N, d); reward token last
    reward_index: int

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate([self.visual, self.text], axis=0)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, 3)`` -> ``(B, (H/p)*(W/p), p*p*3)`` in row-major patch order."""
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ValueError(f"image size {H}x{W} not divisible by patch {patch}")
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


def _attention(x: Tensor, p: dict[str, Tensor], b: int, heads: int) -> Tensor:
    B, L, d = x.shape
    dh = d // heads

    def split(t):
        return t.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(x @ p[f"b{b}.wq"]), split(x @ p[f"b{b}.wk"]), split(x @ p[f"b{b}.wv"])
    att = softmax_rows(q @ k.transpose(0, 1, 3, 2), temperature=math.sqrt(dh))
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return out @ p[f"b{b}.wo"]


def _embed(images: np.ndarray, cond_ids: Sequence[int], p: dict[str, Tensor], cfg: ScorerConfig) -> Tensor:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"expected (B, {cfg.image_size}, {cfg.image_size}, 3) images, got {images.shape}")
    B = images.shape[0]
    patches = Tensor(patchify(images * 2.0 - 1.0, cfg.patch))
    visual = patches @ p["patch_w"] + p["patch_b"] + p["pos"]
    reward = p["reward_emb"].reshape(1, 1, cfg.dim) + Tensor(np.zeros((B, 1, cfg.dim)))
    if cfg.visual_only:
        return concat([visual, reward], axis=1)
    ids = np.asarray(cond_ids, dtype=np.int64)
    if ids.shape != (B,):
        raise ValueError("one condition id per image is required")
    cond = p["cond_emb"][ids].reshape(B, 1, cfg.dim)
    return concat([visual, cond, reward], axis=1)


def _encode(images, cond_ids, p: dict[str, Tensor], cfg: ScorerConfig) -> Tensor:
    x = _embed(images, cond_ids, p, cfg)
    for b in range(cfg.blocks):
        x = x + _attention(layer_norm(x, p[f"b{b}.ln1_g"], p[f"b{b}.ln1_b"]), p, b, cfg.heads)
        h = layer_norm(x, p[f"b{b}.ln2_g"], p[f"b{b}.ln2_b"])
        x = x + silu(h @ p[f"b{b}.w1"] + p[f"b{b}.b1"]) @ p[f"b{b}.w2"] + p[f"b{b}.b2"]
    return x


def _head(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    h = layer_norm(x, p["head_ln_g"], p["head_ln_b"])
    z = silu(h @ p["head_w1"] + p["head_b1"]) @ p["head_w2"] + p["head_b2"]
    return z.reshape(z.shape[:-1])


def _forward_scores(images, cond_ids, p, cfg) -> Tensor:
    z = _head(_encode(images, cond_ids, p, cfg), p)
    return z[:, -1]


def encode(img: np.ndarray, cond: int, params: ScorerParams) -> TokenSequence:
    """Final-block token embeddings for one image and its palette condition."""
    cfg = params.config
    x = _encode(np.asarray(img)[None], [cond], params.tensors(), cfg).data[0]
    M = cfg.num_visual
    return TokenSequence(x[:M].copy(), x[M:].copy(), reward_index=x.shape[0] - 1)


def score(seq: TokenSequence, params: ScorerParams) -> float:
    z = _head(Tensor(seq.tokens[None]), params.tensors()).data[0]
    return float(z[seq.reward_index])


def score_images(images: np.ndarray, cond_ids: Sequence[int], params: ScorerParams,
                 batch: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    p = params.tensors()
    out = [
        _forward_scores(images[i:i + batch], cond_ids[i:i + batch], p, params.config).data
        for i in range(0, len(images), batch)
    ]
    return np.concatenate(out) if out else np.zeros(0)


def export_embeddings(seq: TokenSequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-normalized ``(F_text, F_visual)`` plus a flag array marking zero rows (left at zero)."""
    def norm(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        zero = n[:, 0] == 0
        return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0), zero

    ft, zt = norm(seq.text)
    fv, zv = norm(seq.visual)
    return ft, fv, np.concatenate([zv, zt])


# training

@dataclass
class TrainConfig:
    tau: float = DEFAULT_TAU
    lr: float = 1e-3
    epochs: int = 20
    batch_groups: int = 32
    seed: int = 0
    loss: str = "softrank"
    optimizer: str = "adam"
    visual_only: bool = False


@dataclass
class TrainHistory:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def group_loss(scores: Tensor, kind: str, tau: float) -> Tensor:
    if kind == "softrank":
        return softrank_loss_tensor(scores, tau)
    if kind == "pairwise":
        return pairwise_loss_tensor(scores)
    raise ValueError(f"unknown loss {kind!r}")


def train_scorer_arrays(groups: np.ndarray, cond_ids: Sequence[int], cfg: TrainConfig,
                        scorer_config: ScorerConfig | None = None) -> tuple[ScorerParams, TrainHistory]:
    """Train on ``groups`` of shape ``(G, K, H, W, 3)`` ordered best-first."""
    groups = np.asarray(groups, dtype=np.float64)
    if groups.ndim != 5 or groups.shape[0] == 0:
        raise ValueError("training needs a non-empty (G, K, H, W, 3) array")
    G, K = groups.shape[:2]
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    sc = scorer_config or ScorerConfig(image_size=groups.shape[2], visual_only=cfg.visual_only)
    params = init_scorer(sc, cfg.seed)
    names = list(params.weights)
    tracked = [Tensor(params.weights[k], requires_grad=True) for k in names]
    if cfg.optimizer == "adam":
        opt = Adam(tracked, lr=cfg.lr)
    elif cfg.optimizer == "sgd":
        opt = SGD(tracked, lr=cfg.lr)
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    rng = np.random.default_rng(cfg.seed + 7)
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(G)
        total = 0.0
        for i in range(0, G, cfg.batch_groups):
            idx = perm[i:i + cfg.batch_groups]
            B = len(idx)
            imgs = groups[idx].reshape((B * K,) + groups.shape[2:])
            ids = np.repeat(cond_ids[idx], K)
            p = dict(zip(names, opt.params))
            with GradTape() as tape:
                scores = _forward_scores(imgs, ids, p, sc).reshape(B, K)
                loss = group_loss(scores, cfg.loss, cfg.tau)
            grads = tape.gradient(loss, opt.params)
            opt.step(grads)
            hist.step_losses.append(loss.item())
            total += loss.item() * B
        hist.epoch_losses.append(total / G)
        log.info("scorer epoch %d loss %.4f", epoch, hist.epoch_losses[-1])
    weights = {k: t.data.copy() for k, t in zip(names, opt.params)}
    return ScorerParams(sc, weights), hist


def mean_group_loss(params: ScorerParams, groups: np.ndarray, cond_ids, kind: str = "softrank",
                    tau: float = DEFAULT_TAU) -> float:
    G, K = groups.shape[:2]
    flat = groups.reshape((G * K,) + groups.shape[2:])
    s = score_images(flat, np.repeat(np.asarray(cond_ids), K), params).reshape(G, K)
    return group_loss(Tensor(s), kind, tau).item()


def load_manifest_groups(manifest, root, split: str = "train") -> tuple[np.ndarray, np.ndarray, list]:
    from .dataset_builder import load_group_images

    records = manifest.split(split)
    if not records:
        raise ValueError(f"manifest has no {split!r} groups")
    arr = np.stack([load_group_images(root, r) for r in records])
    return arr, np.array([r.palette_id for r in records]), records


def train_scorer(manifest, root, tau: float = DEFAULT_TAU, lr: float = 1e-3, epochs: int = 20,
                 batch_groups: int = 32, seed: int = 0, **kw) -> tuple[ScorerParams, TrainHistory]:
    groups, ids, _ = load_manifest_groups(manifest, Path(root), "train")
    cfg = TrainConfig(tau=tau, lr=lr, epochs=epochs, batch_groups=batch_groups, seed=seed, **kw)
    return train_scorer_arrays(groups, ids, cfg)
