"""Condition encoders: scene caption, layout entries, road sketch.

Each condition slot is independently nullable. A null caption encodes to a
learned null-caption token sequence, a null layout to learned null-layout
tokens with an all-zero validity mask, and a null sketch to an all-zeros
raster. Training-time dropout composes a joint all-null event with
independent per-slot events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from . import tensor as T

L_TEXT = 16
M_MAX = 8
N_CATEGORIES = 8
N_INSTANCE_IDS = 32
FOURIER_BANDS = 6
PAD_ID = 0
UNK_ID = 1


def load_vocab() -> list[str]:
    """Vocabulary file: one word per line, line number = token id."""
    text = resources.files("mvdit").joinpath("vocab.txt").read_text("utf-8")
    words = text.splitlines()
    assert len(words) == 64
    return words


_VOCAB = load_vocab()
_WORD_TO_ID = {w: i for i, w in enumerate(_VOCAB)}


@dataclass(frozen=True)
class LayoutEntry:
    frame: int
    view: int
    cx: float
    cy: float
    sw: float
    sh: float
    heading: float  # radians, normalized to [-pi, pi)
    instance_id: int
    category_id: int

    def __post_init__(self):
        for name in ("cx", "cy", "sw", "sh"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"LayoutEntry.{name}={v} outside [0, 1]")
        if not 0 <= self.category_id < N_CATEGORIES:
            raise ValueError(f"category_id {self.category_id} out of range")

    def geometry(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.sw, self.sh,
                         normalize_heading(self.heading) / math.pi])


@dataclass
class ConditionTriple:
    """Caption / layout / sketch, each slot independently nullable (None)."""
    caption: Optional[np.ndarray] = None        # (L_TEXT,) int token ids
    layout: Optional[list] = field(default=None)  # list[LayoutEntry]
    sketch: Optional[np.ndarray] = None         # (V, T, 1, H, W) {0,1}

    def replace(self, **kw) -> "ConditionTriple":
        out = ConditionTriple(self.caption, self.layout, self.sketch)
        for k, v in kw.items():
            setattr(out, k, v)
        return out


def normalize_heading(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (theta + math.pi) % (2 * math.pi) - math.pi


def tokenize_caption(text: str) -> np.ndarray:
    """Deterministic id sequence, unknown words -> UNK, suffix-padded."""
    ids = [_WORD_TO_ID.get(w, UNK_ID) for w in text.split()][:L_TEXT]
    ids += [PAD_ID] * (L_TEXT - len(ids))
    return np.array(ids, dtype=np.int64)


def fourier_encode(values: np.ndarray, bands: int = FOURIER_BANDS) -> np.ndarray:
    """Per value v and band b: [sin(2^b pi v), cos(2^b pi v)], value-major."""
    if bands < 1:
        raise ValueError("bands must be >= 1")
    v = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    freqs = (2.0 ** np.arange(bands)) * math.pi
    ang = v * freqs  # (n, bands)
    feats = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (n, bands, 2)
    return feats.reshape(-1)


def encode_caption(caption: Optional[np.ndarray], params: dict,
                   prefix: str = "cond.caption") -> T.Tensor:
    """Token-embedding lookup plus learned positions; None -> null sequence."""
    if caption is None:
        return params[f"{prefix}.null"]
    ids = np.asarray(caption)
    if ids.min() < 0 or ids.max() >= len(_VOCAB):
        raise ValueError(f"caption id out of range: {ids}")
    table = params[f"{prefix}.table"]
    onehot = np.zeros((len(ids), len(_VOCAB)), dtype=table.dtype)
    onehot[np.arange(len(ids)), ids] = 1.0
    emb = T.matmul(T.Tensor(onehot), table)
    return T.add(emb, params[f"{prefix}.pos"])


def layout_feature_dim(bands: int = FOURIER_BANDS, embed_dim: int = 16) -> int:
    return 2 * bands * 5 + 2 * embed_dim


def encode_layout(entries: Optional[Sequence[LayoutEntry]], frame: int,
                  params: dict, prefix: str = "cond.layout") -> tuple:
    """Layout tokens (M_MAX, D) and validity mask (M_MAX,) for one frame.

    Per entry: Fourier-encoded geometry + category embedding + instance-id
    embedding (table of N_INSTANCE_IDS ids, wraparound), concatenated and
    passed through a 2-layer MLP. Absent slots get the learned null token.
    """
    null = params[f"{prefix}.null"]  # (D,)
    d = null.shape[0]
    mask = np.zeros(M_MAX, dtype=np.float32)
    if entries is None:
        entries = []
    sel = [e for e in entries if e.frame == frame]
    if len(sel) > M_MAX:
        raise ValueError(f"{len(sel)} layout entries exceed M_MAX={M_MAX}")
    if not sel:
        tokens = T.mul(T.Tensor(np.ones((M_MAX, 1), dtype=null.dtype)),
                       T.reshape(null, (1, d)))
        return tokens, mask
    cat_t = params[f"{prefix}.cat_table"]
    inst_t = params[f"{prefix}.inst_table"]
    e_dim = cat_t.shape[1]
    feats = np.zeros((len(sel), 2 * FOURIER_BANDS * 5), dtype=cat_t.dtype)
    cat_oh = np.zeros((len(sel), N_CATEGORIES), dtype=cat_t.dtype)
    inst_oh = np.zeros((len(sel), N_INSTANCE_IDS), dtype=cat_t.dtype)
    for i, e in enumerate(sel):
        feats[i] = fourier_encode(e.geometry())
        cat_oh[i, e.category_id] = 1.0
        inst_oh[i, e.instance_id % N_INSTANCE_IDS] = 1.0
    x = T.concat([T.Tensor(feats),
                  T.matmul(T.Tensor(cat_oh), cat_t),
                  T.matmul(T.Tensor(inst_oh), inst_t)], axis=1)
    h = T.gelu(T.linear(x, params[f"{prefix}.mlp1.w"], params[f"{prefix}.mlp1.b"]))
    h = T.linear(h, params[f"{prefix}.mlp2.w"], params[f"{prefix}.mlp2.b"])
    pad = T.mul(T.Tensor(np.ones((M_MAX - len(sel), 1), dtype=null.dtype)),
                T.reshape(null, (1, d)))
    tokens = T.concat([h, pad], axis=0) if M_MAX > len(sel) else h
    mask[: len(sel)] = 1.0
    return tokens, mask


def dropout_conditions(triple: ConditionTriple, rng: np.random.Generator,
                       p_joint: float = 0.05,
                       p_each: float = 0.05) -> ConditionTriple:
    """Joint all-null event first, then independent per-slot null events."""
    if rng.random() < p_joint:
        return ConditionTriple(None, None, None)
    out = ConditionTriple(triple.caption, triple.layout, triple.sketch)
    if rng.random() < p_each:
        out.caption = None
    if rng.random() < p_each:
        out.layout = None
    if rng.random() < p_each:
        out.sketch = None
    return out


def rasterize_sketch(lanes: Sequence[np.ndarray], v: int, t: int, h: int,
                     w: int, rigs: Sequence) -> np.ndarray:
    """Project world polylines into each view and draw 1-px Bresenham lines.

    `lanes` are (n, 2) world-coordinate polylines; `rigs` supply per-view
    crop center and rotation. The raster is static across T.
    """
    out = np.zeros((v, t, 1, h, w), dtype=np.uint8)
    for vi, rig in enumerate(rigs):
        plane = np.zeros((h, w), dtype=np.uint8)
        for poly in lanes:
            pts = project_points(np.asarray(poly, dtype=np.float64), rig, h, w)
            for a, b in zip(pts[:-1], pts[1:]):
                _draw_line(plane, a, b)
        out[vi, :, 0] = plane
    return out


def project_points(world_xy: np.ndarray, rig, h: int, w: int) -> np.ndarray:
    """World (x, y) -> view pixel (x, y): translate, rotate, recenter."""
    cx, cy = rig.center
    c, s = math.cos(-rig.rotation), math.sin(-rig.rotation)
    dx = world_xy[:, 0] - cx
    dy = world_xy[:, 1] - cy
    px = c * dx - s * dy + w / 2.0
    py = s * dx + c * dy + h / 2.0
    return np.stack([px, py], axis=1)


def _draw_line(plane: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    """Bresenham line from a to b (pixel coords); off-screen pixels clipped."""
    h, w = plane.shape
    x0, y0 = int(round(a[0])), int(round(a[1]))
    x1, y1 = int(round(b[0])), int(round(b[1]))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            plane[y0, x0] = 1
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
