"""A small class-conditional DDPM with classifier-free guidance.

Images live in ``[0, 1]``; the model works on ``2x - 1``. The noise predictor
is ``(g_t * z + F(z, t, c)) / sqrt(1 - alpha_bar_t)`` where ``g_t`` is a
learned per-step skip gain and ``F`` an MLP over the flattened image with
sinusoidal timestep features and a per-class embedding. The skip path
carries the full-rank part of the noise that a narrow MLP cannot. The condition embedding is ``base + delta[c]`` and the
null (unconditional) embedding is ``base`` alone, so a class that is never
shown during training stays identical to the unconditional branch.

Guidance combines the two predictions as ``(1 - s) * eps_u + s * eps_c``,
which equals ``eps_u + s * (eps_c - eps_u)`` and is bit-exact at ``s = 0``
and ``s = 1``. ``s`` may be a scalar or a per-pixel field.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import checkpoint
from .numerics import Adam, GradTape, Tensor, silu
from .palettes import NUM_PALETTES

log = logging.getLogger(__name__)

MAGIC = b"TDIF"
TIME_FEATURES = 64

Guidance = Union[float, np.ndarray, Callable[[int, "np.ndarray | None"], "float | np.ndarray"]]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty vector in (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, T: int = 50, beta_start: float | None = None,
               beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas. Defaults are the 1000-step 1e-4 -> 0.02 range rescaled by 1000/T."""
        scale = 1000.0 / T
        beta_start = min(1e-4 * scale, 0.1) if beta_start is None else beta_start
        beta_end = min(0.02 * scale, 0.9) if beta_end is None else beta_end
        return cls(np.linspace(beta_start, beta_end, T))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar`` at step ``t`` in ``[1, T]``; 1.0 at ``t = 0``."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


@dataclass(frozen=True)
class Condition:
    palette_id: int
    num_classes: int = NUM_PALETTES

    def __post_init__(self):
        if not 0 <= self.palette_id < self.num_classes:
            raise ValueError(f"palette_id {self.palette_id} outside [0, {self.num_classes})")


@dataclass
class DenoiserParams:
    weights: dict[str, np.ndarray]
    schedule: NoiseSchedule
    image_size: int = 32

    @property
    def num_classes(self) -> int:
        return self.weights["cond_delta"].shape[0]

    @property
    def hidden(self) -> int:
        return self.weights["b_in"].shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.weights.items()}

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.weights)
        arrays["schedule.betas"] = self.schedule.betas
        arrays["config.image_size"] = np.array([float(self.image_size)])
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "DenoiserParams":
        arrays = dict(arrays)
        schedule = NoiseSchedule(arrays.pop("schedule.betas"))
        size = int(arrays.pop("config.image_size")[0])
        return cls(arrays, schedule, size)

    def save(self, path) -> None:
        checkpoint.save(path, MAGIC, self.to_arrays())

    @classmethod
    def load(cls, path) -> "DenoiserParams":
        return cls.from_arrays(checkpoint.load(path, MAGIC))


def init_denoiser(seed: int = 0, image_size: int = 32, hidden: int = 512,
                  num_classes: int = NUM_PALETTES, schedule: NoiseSchedule | None = None,
                  zero: bool = False) -> DenoiserParams:
    schedule = schedule or NoiseSchedule.linear()
    rng = np.random.default_rng(seed)
    D = image_size * image_size * 3

    def dense(n_in, n_out, gain=1.0):
        if zero:
            return np.zeros((n_in, n_out))
        return rng.standard_normal((n_in, n_out)) * (gain / math.sqrt(n_in))

    w = {
        "w_in": dense(D, hidden),
        "b_in": np.zeros(hidden),
        "w_t": dense(TIME_FEATURES, hidden),
        "cond_base": np.zeros(hidden),
        "cond_delta": np.zeros((num_classes, hidden)),
        "w_mid": dense(hidden, hidden),
        "b_mid": np.zeros(hidden),
        "w_t2": dense(TIME_FEATURES, hidden),
        "w_out": dense(hidden, D, gain=0.1),
        "b_out": np.zeros(D),
        "skip_gain": np.zeros(schedule.T) if zero else np.ones(schedule.T),
    }
    return DenoiserParams(w, schedule, image_size)


def time_features(t: np.ndarray, T: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1) * (1000.0 / T)
    half = TIME_FEATURES // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def predict_eps(p: dict[str, Tensor], z_flat, t: np.ndarray, cond_ids: np.ndarray,
                schedule: NoiseSchedule) -> Tensor:
    """Noise prediction for a batch. ``cond_ids == num_classes`` means unconditional."""
    t = np.asarray(t, dtype=np.int64)
    tf = Tensor(time_features(t, schedule.T))
    num_classes = p["cond_delta"].shape[0]
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    mask = (cond_ids < num_classes).astype(np.float64)[:, None]
    delta = p["cond_delta"][np.minimum(cond_ids, num_classes - 1)] * mask
    h = silu(z_flat @ p["w_in"] + p["b_in"] + tf @ p["w_t"] + p["cond_base"] + delta)
    h = silu(h @ p["w_mid"] + p["b_mid"] + tf @ p["w_t2"])
    out = h @ p["w_out"] + p["b_out"] + z_flat * p["skip_gain"][t - 1].reshape(-1, 1)
    inv_sigma = 1.0 / np.sqrt(1.0 - schedule.alpha_bars[t - 1])
    return out * inv_sigma[:, None]


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def forward_noise_ab(x0, alpha_bar: float, noise) -> np.ndarray:
    """``forward_noise`` with an explicit ``alpha_bar`` (used by tests and training)."""
    return math.sqrt(alpha_bar) * np.asarray(x0) + math.sqrt(1.0 - alpha_bar) * np.asarray(noise)


def predict_pair(params: DenoiserParams, z: np.ndarray, t: int, cond: Condition | Sequence[int],
                 tensors: dict[str, Tensor] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unconditional and conditional noise predictions for ``z`` of shape ``(H, W, 3)`` or ``(B, H, W, 3)``."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 3
    zb = z[None] if single else z
    B = zb.shape[0]
    ids = [cond.palette_id] * B if isinstance(cond, Condition) else list(cond)
    if len(ids) != B:
        raise ValueError("one condition per batch element is required")
    tensors = tensors or params.tensors()
    flat = zb.reshape(B, -1)
    both = np.concatenate([flat, flat], axis=0)
    cids = np.concatenate([np.full(B, params.num_classes), np.asarray(ids)])
    eps = predict_eps(tensors, Tensor(both), np.full(2 * B, t), cids, params.schedule).data
    eps_u = eps[:B].reshape(zb.shape)
    eps_c = eps[B:].reshape(zb.shape)
    if single:
        return eps_u[0], eps_c[0]
    return eps_u, eps_c


def combine_guidance(eps_u: np.ndarray, eps_c: np.ndarray, s) -> np.ndarray:
    """Classifier-free guidance with scalar or per-pixel ``s``.

    A field must match the spatial shape of the predictions (``(H, W)`` or
    ``(B, H, W)``); it scales the difference equally in every channel.
    """
    if np.ndim(s) == 0:
        s = float(s)
        if not math.isfinite(s):
            raise ValueError("guidance scale must be finite")
        return (1.0 - s) * eps_u + s * eps_c
    s = np.asarray(s, dtype=np.float64)
    spatial = eps_u.shape[:-1]
    if s.shape != spatial and s.shape != spatial[-2:]:
        raise ValueError(f"guidance field shape {s.shape} does not match spatial shape {spatial}")
    s = s[..., None]
    return (1.0 - s) * eps_u + s * eps_c


def cfg_predict(params: DenoiserParams, z: np.ndarray, t: int, cond: Condition | Sequence[int],
                s, tensors: dict[str, Tensor] | None = None) -> np.ndarray:
    eps_u, eps_c = predict_pair(params, z, t, cond, tensors)
    return combine_guidance(eps_u, eps_c, s)


def sample_batch(params: DenoiserParams, conds: Sequence[int], seeds: Sequence[int],
                 guidance: Guidance, clip_denoised: bool = True) -> np.ndarray:
    """Ancestral sampling of one image per ``(cond, seed)``; returns ``(B, H, W, 3)`` in ``[0, 1]``.

    Each seed owns its RNG, so an image depends only on its own seed.
    ``guidance`` may be a callable ``(step, x0_estimate) -> scale`` where
    ``step`` counts denoising steps from 0 and ``x0_estimate`` is the previous
    step's denoised image (``None`` at step 0).
    """
    if len(conds) != len(seeds):
        raise ValueError("conds and seeds must have equal length")
    sched = params.schedule
    size = params.image_size
    shape = (size, size, 3)
    rngs = [np.random.default_rng(s) for s in seeds]
    z = np.stack([r.standard_normal(shape) for r in rngs])
    tensors = params.tensors()
    abar = sched.alpha_bars
    x0_img = None
    for step in range(sched.T):
        t = sched.T - step
        s = guidance(step, x0_img) if callable(guidance) else guidance
        eps = cfg_predict(params, z, t, list(conds), s, tensors)
        ab = abar[t - 1]
        ab_prev = abar[t - 2] if t > 1 else 1.0
        beta = sched.betas[t - 1]
        x0 = (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if clip_denoised:
            x0 = np.clip(x0, -1.0, 1.0)
        c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
        mean = c0 * x0 + ct * z
        noise = np.stack([r.standard_normal(shape) for r in rngs])
        if t > 1:
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
            z = mean + math.sqrt(var) * noise
        else:
            z = mean
        x0_img = np.clip((x0 + 1.0) * 0.5, 0.0, 1.0)
    return np.clip((z + 1.0) * 0.5, 0.0, 1.0)


def sample(params: DenoiserParams, cond: Condition, s: Guidance, seed: int,
           clip_denoised: bool = True) -> np.ndarray:
    return sample_batch(params, [cond.palette_id], [seed], s, clip_denoised)[0]


@dataclass
class TrainResult:
    params: DenoiserParams
    losses: list[float] = field(default_factory=list)


def train_denoiser(images: np.ndarray, labels: Sequence[int], cond_drop_prob: float = 0.1,
                   epochs: int = 100, lr: float = 1e-3, seed: int = 0, batch_size: int = 64,
                   hidden: int = 512, schedule: NoiseSchedule | None = None,
                   num_classes: int = NUM_PALETTES,
                   init: DenoiserParams | None = None) -> TrainResult:
    """Fit the noise predictor by MSE with condition dropout; returns params and per-step losses."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("need a non-empty (N, H, W, 3) image array")
    if labels.shape[0] != images.shape[0]:
        raise ValueError("one label per image is required")
    if not 0.0 <= cond_drop_prob <= 1.0:
        raise ValueError("cond_drop_prob must lie in [0, 1]")
    N, H = images.shape[0], images.shape[1]
    params = init or init_denoiser(seed, H, hidden, num_classes, schedule)
    sched = params.schedule
    names = list(params.weights)
    rng = np.random.default_rng(seed + 1)
    x_all = (images * 2.0 - 1.0).reshape(N, -1)
    abar = sched.alpha_bars
    # per-step weights (1 - alpha_bar), normalized to mean 1 over steps
    weight = (1.0 - abar) / np.mean(1.0 - abar)
    opt = Adam([Tensor(params.weights[k], requires_grad=True) for k in names], lr=lr, grad_clip=1.0)
    losses: list[float] = []
    for epoch in range(epochs):
        if N < batch_size:
            batches = [rng.integers(0, N, batch_size)]
        else:
            perm = rng.permutation(N)
            batches = [perm[i:i + batch_size] for i in range(0, N, batch_size)]
        for idx in batches:
            B = len(idx)
            t = rng.integers(1, sched.T + 1, B)
            noise = rng.standard_normal((B, x_all.shape[1]))
            ab = abar[t - 1][:, None]
            zt = np.sqrt(ab) * x_all[idx] + np.sqrt(1.0 - ab) * noise
            ids = np.where(rng.random(B) < cond_drop_prob, num_classes, labels[idx])
            p = dict(zip(names, opt.params))
            with GradTape() as tape:
                pred = predict_eps(p, Tensor(zt), t, ids, sched)
                diff = pred - noise
                loss = ((diff * diff).mean(axis=1) * weight[t - 1]).mean()
            grads = tape.gradient(loss, opt.params)
            opt.step(grads)
            losses.append(loss.item())
        if epoch % 50 == 0:
            log.debug("denoiser epoch %d loss %.4f", epoch, losses[-1])
    weights = {k: t.data.copy() for k, t in zip(names, opt.params)}
    return TrainResult(DenoiserParams(weights, sched, H), losses)
