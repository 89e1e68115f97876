"""Procedural multi-view toy world and desk-scale evaluation metrics.

A scene is a 2-D strip of road with lanes and moving vehicles, observed by
V overlapping cameras. Pixels, layout entries and the road sketch are all
derived from the same world state, never from each other. Metrics use
fixed random (untrained) feature probes; their absolute values are only
meaningful for desk-scale comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .conditioning import (LayoutEntry, M_MAX, normalize_heading,
                           project_points, rasterize_sketch)

# weather word -> (background intensity, background noise sigma)
WEATHER_BACKGROUNDS = {
    "clear": (0.55, 0.02),
    "rain": (0.40, 0.03),
    "fog": (0.70, 0.02),
    "night": (0.12, 0.02),
}

LANE_INTENSITY = 0.82
VEHICLE_COLORS = np.array([
    [0.95, 0.30, 0.25],  # 0 car, red
    [0.25, 0.45, 0.95],  # 1 car, blue
    [0.95, 0.85, 0.25],  # 2 taxi, yellow
    [0.30, 0.85, 0.35],  # 3 van, green
    [0.92, 0.92, 0.92],  # 4 truck, white
    [0.10, 0.10, 0.12],  # 5 truck, black
    [0.90, 0.55, 0.20],  # 6 bus, orange
    [0.65, 0.30, 0.85],  # 7 bike, purple
])


@dataclass(frozen=True)
class CameraRig:
    center: tuple  # world (x, y) of the view center
    rotation: float = 0.0  # radians


@dataclass
class Vehicle:
    category: int
    length: float
    width: float
    lane: int
    speed: float
    offset: float
    shade: float = 1.0


@dataclass
class ToySceneSpec:
    seed: int
    lanes: list  # list of (n, 2) world polylines
    vehicles: list  # list[Vehicle]
    weather: str = "clear"
    caption: str = "day clear light traffic"
    rigs: list = field(default_factory=list)
    frames: int = 16
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if len(self.vehicles) > M_MAX:
            raise ValueError(f"at most {M_MAX} vehicles per scene")
        if self.weather not in WEATHER_BACKGROUNDS:
            raise ValueError(f"unknown weather {self.weather!r}")


@dataclass
class RenderedScene:
    video: np.ndarray      # (V, T, 3, H, W) float32 in [0, 1]
    layouts: list          # list[LayoutEntry]
    sketch: np.ndarray     # (V, T, 1, H, W) uint8
    caption: str
    spec: ToySceneSpec


def default_rigs(n_views: int, height: int, width: int,
                 overlap: float = 0.25) -> list:
    """Side-by-side cameras along the road with >= `overlap` width overlap."""
    stride = width * (1.0 - overlap)
    y = height / 2.0
    return [CameraRig(center=(width / 2.0 + i * stride, y)) for i in range(n_views)]


def world_extent(rigs: Sequence[CameraRig], width: int) -> float:
    return max(r.center[0] for r in rigs) + width / 2.0


def _lane_position(lane: np.ndarray, s: float) -> tuple:
    """Point and heading at arc length s along a polyline, wrapping around."""
    segs = lane[1:] - lane[:-1]
    lens = np.hypot(segs[:, 0], segs[:, 1])
    total = lens.sum()
    s = s % total
    for i, ln in enumerate(lens):
        if s <= ln:
            u = s / ln
            p = lane[i] + u * segs[i]
            heading = math.atan2(segs[i, 1], segs[i, 0])
            return p, heading
        s -= ln
    p = lane[-1]
    heading = math.atan2(segs[-1, 1], segs[-1, 0])
    return p, heading


def _vehicle_corners(center: np.ndarray, heading: float, length: float,
                     width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    half = np.array([[length / 2, width / 2], [length / 2, -width / 2],
                     [-length / 2, -width / 2], [-length / 2, width / 2]])
    rot = np.array([[c, -s], [s, c]])
    return center[None, :] + half @ rot.T


def _fill_convex(mask_h: int, mask_w: int, corners: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels inside a convex polygon (pixel coords)."""
    n = len(corners)
    area2 = sum(corners[i][0] * corners[(i + 1) % n][1]
                - corners[(i + 1) % n][0] * corners[i][1] for i in range(n))
    if area2 < 0:
        corners = corners[::-1]
    ys, xs = np.mgrid[0:mask_h, 0:mask_w]
    pts = np.stack([xs + 0.5, ys + 0.5], axis=-1)
    inside = np.ones((mask_h, mask_w), dtype=bool)
    for i in range(n):
        a, b = corners[i], corners[(i + 1) % n]
        edge = b - a
        rel = pts - a
        cross = edge[0] * rel[..., 1] - edge[1] * rel[..., 0]
        inside &= cross >= 0
    return inside


def generate_scene(spec: ToySceneSpec) -> RenderedScene:
    """Deterministic render of one scene from its spec.

    Vehicles are filled oriented rectangles moving along lanes at constant
    speed (wrapping at lane ends). Layouts and the sketch are projections of
    the same world state as the pixels.
    """
    rigs = spec.rigs or default_rigs(6, spec.height, spec.width)
    v, t, h, w = len(rigs), spec.frames, spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    bg, noise_sigma = WEATHER_BACKGROUNDS[spec.weather]
    video = np.empty((v, t, 3, h, w), dtype=np.float32)
    layouts: list = []

    sketch = rasterize_sketch(spec.lanes, v, t, h, w, rigs)
    lane_px = sketch[:, 0, 0].astype(bool)  # (V, H, W), static lanes

    noise = rng.normal(0.0, noise_sigma, size=(t, 3, h, w)).astype(np.float32)
    for vi, rig in enumerate(rigs):
        for ti in range(t):
            frame = np.full((3, h, w), bg, dtype=np.float32) + noise[ti]
            frame[:, lane_px[vi]] = LANE_INTENSITY
            for inst_id, veh in enumerate(spec.vehicles):
                lane = np.asarray(spec.lanes[veh.lane % len(spec.lanes)],
                                  dtype=np.float64)
                center, heading = _lane_position(
                    lane, veh.offset + veh.speed * ti)
                corners = _vehicle_corners(center, heading, veh.length,
                                           veh.width)
                view_pts = project_points(corners, rig, h, w)
                xmin, ymin = view_pts.min(axis=0)
                xmax, ymax = view_pts.max(axis=0)
                if xmax <= 0 or ymax <= 0 or xmin >= w or ymin >= h:
                    continue
                fill = _fill_convex(h, w, view_pts)
                if fill.any():
                    color = np.clip(
                        VEHICLE_COLORS[veh.category] * veh.shade, 0, 1)
                    frame[:, fill] = color[:, None].astype(np.float32)
                x0c, x1c = max(xmin, 0.0), min(xmax, float(w))
                y0c, y1c = max(ymin, 0.0), min(ymax, float(h))
                if x1c <= x0c or y1c <= y0c:
                    continue
                layouts.append(LayoutEntry(
                    frame=ti, view=vi,
                    cx=float((x0c + x1c) / 2 / w), cy=float((y0c + y1c) / 2 / h),
                    sw=float((x1c - x0c) / w), sh=float((y1c - y0c) / h),
                    heading=normalize_heading(heading - rig.rotation),
                    instance_id=inst_id, category_id=veh.category))
            video[vi, ti] = frame
    video = np.clip(video, 0.0, 1.0)
    return RenderedScene(video=video, layouts=layouts, sketch=sketch,
                         caption=spec.caption, spec=spec)


def sample_scene_spec(seed: int, frames: int = 16, height: int = 32,
                      width: int = 32, n_views: int = 6) -> ToySceneSpec:
    """Random but fully seed-determined scene spec."""
    rng = np.random.default_rng(seed)
    rigs = default_rigs(n_views, height, width)
    extent = world_extent(rigs, width)
    lane_ys = [height * 0.35, height * 0.65]
    lanes = [np.array([[-4.0, y], [extent + 4.0, y]]) for y in lane_ys]
    n_veh = int(rng.integers(2, M_MAX + 1))
    vehicles = []
    for _ in range(n_veh):
        cat = int(rng.integers(0, len(VEHICLE_COLORS)))
        vehicles.append(Vehicle(
            category=cat,
            length=float(rng.uniform(4.0, 8.0)),
            width=float(rng.uniform(2.5, 4.0)),
            lane=int(rng.integers(0, len(lanes))),
            speed=float(rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])),
            offset=float(rng.uniform(0.0, extent)),
            shade=float(rng.uniform(0.8, 1.0))))
    weather = str(rng.choice(["clear", "rain", "fog", "night"]))
    density = str(rng.choice(["light", "heavy", "busy", "quiet"]))
    time_word = "night" if weather == "night" else "day"
    caption = (f"{time_word} {weather} {density} traffic"
               if weather != "night" else f"night {density} traffic")
    return ToySceneSpec(seed=seed, lanes=lanes, vehicles=vehicles,
                        weather=weather, caption=caption, rigs=rigs,
                        frames=frames, height=height, width=width)


# ---------------------------------------------------------------------------
# Metrics (fixed random-feature probes)


def _probe_weights(probe_seed: int, c_in: int = 3):
    rng = np.random.default_rng(probe_seed)
    w1 = rng.normal(0, (c_in * 16) ** -0.5, (16, c_in, 4, 4))
    w2 = rng.normal(0, (16 * 16) ** -0.5, (64, 16, 4, 4))
    return w1.astype(np.float32), w2.astype(np.float32)


def _conv_down(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Non-overlapping strided conv (kernel == stride), via reshaping."""
    c_out, c_in, kh, kw = w.shape
    n, c, h, ww = x.shape
    x = x.reshape(n, c, h // kh, kh, ww // kw, kw)
    x = x.transpose(0, 2, 4, 1, 3, 5).reshape(n, (h // kh) * (ww // kw), -1)
    out = x @ w.reshape(c_out, -1).T
    return np.tanh(out).transpose(0, 2, 1).reshape(
        n, c_out, h // kh, ww // kw)


def clip_features(video: np.ndarray, probe_seed: int) -> np.ndarray:
    """64-dim clip embedding: 2 random conv-downsample layers, temporal mean."""
    v, t, c, h, w = video.shape
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise ValueError(f"clip features need H, W multiples of 16, "
                         f"got {h}x{w}")
    w1, w2 = _probe_weights(probe_seed, c)
    x = video.reshape(v * t, c, h, w).astype(np.float32)
    x = _conv_down(x, w1, 4)
    x = _conv_down(x, w2, 4)
    x = x.mean(axis=(2, 3))          # (V*T, 64)
    return x.reshape(v, t, -1).mean(axis=(0, 1))


def metric_feature_distance(set_a: Sequence[np.ndarray],
                            set_b: Sequence[np.ndarray],
                            probe_seed: int = 0) -> float:
    """Diagonal-covariance Frechet distance between clip feature sets."""
    if len(set_a) < 16 or len(set_b) < 16:
        raise ValueError("need at least 16 videos per set")
    fa = np.stack([clip_features(v, probe_seed) for v in set_a])
    fb = np.stack([clip_features(v, probe_seed) for v in set_b])
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    var_a, var_b = fa.var(axis=0), fb.var(axis=0)
    return float(((mu_a - mu_b) ** 2).sum()
                 + (var_a + var_b - 2 * np.sqrt(var_a * var_b)).sum())


def metric_layout_adherence(video: np.ndarray, layouts: Sequence) -> float:
    """Mean deviation-from-background inside layout boxes over outside.

    The background estimate is the per-channel median of each (view, frame);
    deviation is the channel-averaged absolute difference from it. The
    denominator uses the median deviation outside the boxes, which is robust
    to the thin high-contrast lane markings. Returns 1.0 when the outside
    region is empty or carries no signal.
    """
    if not layouts:
        raise ValueError("empty layout set")
    v, t, c, h, w = video.shape
    inside = np.zeros((v, t, h, w), dtype=bool)
    for e in layouts:
        if e.view >= v or e.frame >= t:
            continue
        x0 = int(np.floor((e.cx - e.sw / 2) * w))
        x1 = int(np.ceil((e.cx + e.sw / 2) * w))
        y0 = int(np.floor((e.cy - e.sh / 2) * h))
        y1 = int(np.ceil((e.cy + e.sh / 2) * h))
        inside[e.view, e.frame, max(y0, 0): y1, max(x0, 0): x1] = True
    bg = np.median(video, axis=(3, 4), keepdims=True)
    dev = np.abs(video - bg).mean(axis=2)  # (V, T, H, W)
    outside = ~inside
    if not inside.any() or not outside.any():
        return 1.0
    denom = float(np.median(dev[outside]))
    if denom < 1e-6:
        return 1.0
    return float(dev[inside].mean() / denom)


def metric_temporal_consistency(video: np.ndarray, probe_seed: int = 0) -> float:
    """Mean cosine similarity of random-feature frame embeddings over time."""
    v, t, c, h, w = video.shape
    if t < 2:
        raise ValueError("need at least 2 frames")
    rng = np.random.default_rng(probe_seed)
    proj = rng.normal(0, (c * h * w) ** -0.5, (c * h * w, 64)).astype(np.float32)
    flat = video.reshape(v, t, -1) @ proj  # (V, T, 64)
    a, b = flat[:, :-1], flat[:, 1:]
    num = (a * b).sum(axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1) + 1e-12
    return float((num / den).mean())
