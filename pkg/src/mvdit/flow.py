"""Rectified-flow training and sampling.

Forward process x_t = (1-t) x0 + t x1 with x0 the clean data and
x1 ~ N(0, I); the model regresses the constant velocity (x1 - x0).
Sampling starts from noise at t=1 and Euler-walks down to the data at t=0.
First-k frame masking clamps the leading frames to clean data both in
training and at every sampling step, enabling autoregressive rollout. Classifier-free guidance combines four forward
passes over nested condition drops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import model as model_mod
from . import tensor as T
from .conditioning import ConditionTriple, dropout_conditions


@dataclass
class MaskSpec:
    """Prefix frame mask: frames 0..k-1 carry clean conditioning data."""
    k: int
    frames: int

    def __post_init__(self):
        if not 0 <= self.k < self.frames:
            raise ValueError(f"k={self.k} must satisfy 0 <= k < T={self.frames}")

    def mask(self) -> np.ndarray:
        m = np.zeros(self.frames, dtype=np.float32)
        m[: self.k] = 1.0
        return m


@dataclass
class SamplerConfig:
    steps: int = 30
    lambda_t: float = 7.0
    lambda_l: float = 2.0
    lambda_r: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name in ("lambda_t", "lambda_l", "lambda_r"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name}={v} must be finite and >= 0")


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """(1-t) x0 + t x1, elementwise."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return (1.0 - t) * x0 + t * x1


def _frame_mask_array(m: np.ndarray, latent_shape: tuple) -> np.ndarray:
    t_axis = latent_shape[-4]
    if len(m) != t_axis:
        raise ValueError(f"mask length {len(m)} != frame count {t_axis}")
    shape = [1] * len(latent_shape)
    shape[-4] = t_axis
    return m.reshape(shape)


def apply_frame_mask(x_t: np.ndarray, clean: np.ndarray,
                     m: np.ndarray) -> np.ndarray:
    """x_t (1 - m) + clean m over the frame axis of a (.., V, T, C, h, w)
    latent: frames with m=1 are clamped to the clean conditioning data."""
    mb = _frame_mask_array(np.asarray(m, dtype=x_t.dtype), x_t.shape)
    return x_t * (1.0 - mb) + clean * mb


def rf_loss(params: dict, cfg, batch: Sequence, rng: np.random.Generator,
            k_max: Optional[int] = None,
            dropout: bool = True) -> tuple[T.Tensor, dict]:
    """Velocity-matching loss on one batch of (clean latent, conditions).

    Per item: x0 is the clean latent, x1 ~ N(0, I), t ~ U(0,1), condition
    dropout, linear interpolation, then prefix-k clamping to the clean
    frames with k ~ U{0..k_max}. The squared error is averaged over
    elements of unclamped frames only.
    """
    dtype = params["patch.w"].dtype  # float32 training, float64 verification
    x0 = np.stack([item[0] for item in batch]).astype(dtype)
    frames = x0.shape[2]
    if k_max is None:
        k_max = frames // 2
    b = x0.shape[0]
    x1 = rng.standard_normal(x0.shape).astype(dtype)
    t = rng.uniform(0.0, 1.0, size=b)
    conds = []
    masks = np.zeros((b, frames), dtype=np.float32)
    masks[:, : int(rng.integers(0, k_max + 1))] = 1.0  # one k per batch
    for item in batch:
        c = item[1]
        conds.append(dropout_conditions(c, rng) if dropout else c)
    x_t = np.stack([
        apply_frame_mask(interpolate(x0[i], x1[i], t[i]), x0[i], masks[i])
        for i in range(b)])
    loss = rf_loss_fixed(params, cfg, x_t, t, conds, x1 - x0, masks)
    aux = {"t": t, "masks": masks, "conds": conds, "x_t": x_t, "x1": x1}
    return loss, aux


def rf_loss_fixed(params: dict, cfg, x_t: np.ndarray, t: np.ndarray,
                  conds: Sequence[ConditionTriple], target: np.ndarray,
                  frame_masks: np.ndarray) -> T.Tensor:
    """Masked velocity-matching loss with all randomness already drawn.

    `frame_masks` is (B, T) with 1 on clamped frames; the loss averages the
    squared error over elements of unclamped frames only.
    """
    vel = model_mod.forward_velocity(params, cfg, T.Tensor(x_t), t, conds)
    diff = T.add(vel, T.scale(T.Tensor(target), -1.0))
    live = np.repeat(
        (1.0 - frame_masks)[:, None, :, None, None, None], x_t.shape[1], axis=1)
    n_live = float(live.sum() * np.prod(x_t.shape[3:]))
    if n_live == 0:
        raise ValueError("every frame is masked; nothing to train on")
    masked = T.mul(diff, T.Tensor(
        np.broadcast_to(live.astype(x_t.dtype), x_t.shape).copy()))
    return T.scale(T.sum_sq(masked), 1.0 / n_live)


def cfg_velocity(velocity_fn: Callable, x_t: np.ndarray, t: float,
                 cond: ConditionTriple, lambda_t: float, lambda_l: float,
                 lambda_r: float) -> np.ndarray:
    """Three-term guidance from exactly four forward passes.

    v' = v(phi,phi,phi) + l_T [v(cT,cL,cR) - v(phi,cL,cR)]
                        + l_L [v(phi,cL,cR) - v(phi,phi,cR)]
                        + l_R [v(phi,phi,cR) - v(phi,phi,phi)]

    Regrouped per pass, the coefficients are: full λT, (φ,cL,cR) λL-λT,
    (φ,φ,cR) λR-λL, and (φ,φ,φ) 1-λR; passes whose coefficient is zero are
    skipped (bitwise-identical result, fewer forward evaluations).
    """
    passes = (
        (lambda_t, cond),
        (lambda_l - lambda_t, cond.replace(caption=None)),
        (lambda_r - lambda_l, cond.replace(caption=None, layout=None)),
        (1.0 - lambda_r, ConditionTriple(None, None, None)),
    )
    out = None
    for coeff, c in passes:
        if coeff == 0.0:
            continue
        term = coeff * velocity_fn(x_t, t, c)
        out = term if out is None else out + term
    return out


def euler_sample_step(x_t: np.ndarray, velocity: np.ndarray,
                      n_steps: int) -> np.ndarray:
    """One reverse Euler step: x - velocity / N."""
    return x_t - velocity / float(n_steps)


def model_velocity_fn(params: dict, cfg) -> Callable:
    """Single-clip velocity closure over the trained model."""
    def fn(x_t: np.ndarray, t: float, cond: ConditionTriple) -> np.ndarray:
        out = model_mod.forward_velocity(
            params, cfg, T.Tensor(x_t[None].astype(np.float32)),
            np.array([t]), [cond])
        return out.data[0]
    return fn


def generate(velocity_fn: Callable, cond: ConditionTriple,
             sampler: SamplerConfig, mask: MaskSpec, latent_shape: tuple,
             conditioning_frames: Optional[np.ndarray] = None,
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sample one latent clip of shape (V, T, C, h, w).

    Conditioning frames are clamped before every velocity evaluation and
    once after the final step. Deterministic given the sampler seed.
    """
    if mask.k > 0 and conditioning_frames is None:
        raise ValueError(f"k={mask.k} requires conditioning frames")
    if rng is None:
        rng = np.random.default_rng(sampler.seed)
    m = mask.mask()
    clean = np.zeros(latent_shape, dtype=np.float32)
    if conditioning_frames is not None:
        clean[:, : mask.k] = conditioning_frames[:, : mask.k]
    x = rng.standard_normal(latent_shape).astype(np.float32)
    n = sampler.steps
    for step in range(n, 0, -1):
        t = step / n
        if mask.k > 0:
            x = apply_frame_mask(x, clean, m)
        v = cfg_velocity(velocity_fn, x, t, cond, sampler.lambda_t,
                         sampler.lambda_l, sampler.lambda_r)
        x = euler_sample_step(x, v, n)
    if mask.k > 0:
        x = apply_frame_mask(x, clean, m)
    return x


def rollout(velocity_fn: Callable, conds: Sequence[ConditionTriple],
            sampler: SamplerConfig, k: int, latent_shape: tuple,
            seed_frames: Optional[np.ndarray] = None) -> np.ndarray:
    """Autoregressive long video: clip i is clamped to the last k frames of
    clip i-1; overlapping frames of each later clip are dropped on concat.

    Output frame count: T + (n_clips - 1) (T - k).
    """
    frames = latent_shape[1]
    if k >= frames:
        raise ValueError(f"k={k} must be < clip length T={frames}")
    if len(conds) < 1:
        raise ValueError("need at least one clip condition")
    rng = np.random.default_rng(sampler.seed)
    clips = []
    prev = None
    for i, cond in enumerate(conds):
        if i == 0:
            if seed_frames is not None:
                mask = MaskSpec(k=k, frames=frames)
                clip = generate(velocity_fn, cond, sampler, mask, latent_shape,
                                conditioning_frames=seed_frames, rng=rng)
            else:
                clip = generate(velocity_fn, cond, sampler,
                                MaskSpec(k=0, frames=frames), latent_shape,
                                rng=rng)
        else:
            conditioning = np.zeros(latent_shape, dtype=np.float32)
            conditioning[:, :k] = prev[:, frames - k:]
            clip = generate(velocity_fn, cond, sampler,
                            MaskSpec(k=k, frames=frames), latent_shape,
                            conditioning_frames=conditioning, rng=rng)
        clips.append(clip if i == 0 else clip[:, k:])
        prev = clip
    return np.concatenate(clips, axis=1)
