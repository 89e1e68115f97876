"""Lossless space-to-depth latent codec.

Replaces a learned autoencoder with an exact, invertible rearrangement:
each f x f pixel neighborhood becomes f^2 channels at 1/f resolution,
applied independently per view and per frame. Video axes are
(V, T, C, H, W); latent axes are (V, T, C*f*f, H/f, W/f).
"""

from __future__ import annotations

import numpy as np


def encode(video: np.ndarray, f: int) -> np.ndarray:
    """Space-to-depth: pixel (c, y, x) -> channel c*f*f + (y%f)*f + (x%f)."""
    if video.ndim != 5:
        raise ValueError(f"expected (V,T,C,H,W) video, got shape {video.shape}")
    v, t, c, h, w = video.shape
    if h % f or w % f:
        raise ValueError(f"H={h}, W={w} not divisible by factor {f}")
    x = video.reshape(v, t, c, h // f, f, w // f, f)
    x = x.transpose(0, 1, 2, 4, 6, 3, 5)
    return np.ascontiguousarray(x.reshape(v, t, c * f * f, h // f, w // f))


def decode(latent: np.ndarray, f: int) -> np.ndarray:
    """Exact inverse of `encode`."""
    if latent.ndim != 5:
        raise ValueError(f"expected (V,T,C,h,w) latent, got shape {latent.shape}")
    v, t, cl, h, w = latent.shape
    if cl % (f * f):
        raise ValueError(f"C_lat={cl} not divisible by f^2={f * f}")
    c = cl // (f * f)
    x = latent.reshape(v, t, c, f, f, h, w)
    x = x.transpose(0, 1, 2, 5, 3, 6, 4)
    return np.ascontiguousarray(x.reshape(v, t, c, h * f, w * f))


def latent_channels(c: int, f: int) -> int:
    return c * f * f
