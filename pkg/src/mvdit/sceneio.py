"""Bit-exact scene file format and dataset manifests.

Scene file layout (little-endian):
  magic "TOYW", version u16,
  header: V, T, C, H, W as u16 each,
  caption: u32 byte length + UTF-8 bytes,
  layout: u32 entry count, then per entry
      u16 frame, u16 view, 5 x f32 (cx, cy, sw, sh, heading),
      u32 instance id, u16 category,
  video: V*T*C*H*W f32 values, row-major,
  sketch: V*T*H*W u8 values in {0, 1}.

Manifest: one line per scene, tab-separated: path, bucket key, sha256.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditioning import LayoutEntry
from .toyworld import RenderedScene, ToySceneSpec, generate_scene, sample_scene_spec

MAGIC = b"TOYW"
VERSION = 1
_ENTRY = struct.Struct("<HH5fIH")


@dataclass
class SceneRecord:
    video: np.ndarray
    layouts: list
    sketch: np.ndarray
    caption: str


def write_scene(path, video: np.ndarray, layouts: Sequence[LayoutEntry],
                sketch: np.ndarray, caption: str) -> None:
    v, t, c, h, w = video.shape
    if sketch.shape != (v, t, 1, h, w):
        raise ValueError(f"sketch shape {sketch.shape} does not match video")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack("<5H", v, t, c, h, w)
    cap = caption.encode("utf-8")
    blob += struct.pack("<I", len(cap)) + cap
    blob += struct.pack("<I", len(layouts))
    for e in layouts:
        blob += _ENTRY.pack(e.frame, e.view, e.cx, e.cy, e.sw, e.sh,
                            e.heading, e.instance_id, e.category_id)
    blob += np.ascontiguousarray(video, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(sketch, dtype=np.uint8).tobytes()
    Path(path).write_bytes(bytes(blob))


def read_scene(path) -> SceneRecord:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a scene file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported scene version {version}")
    v, t, c, h, w = struct.unpack_from("<5H", data, 6)
    off = 16
    (cap_len,) = struct.unpack_from("<I", data, off)
    off += 4
    caption = data[off: off + cap_len].decode("utf-8")
    off += cap_len
    (n_entries,) = struct.unpack_from("<I", data, off)
    off += 4
    layouts = []
    for _ in range(n_entries):
        frame, view, cx, cy, sw, sh, heading, inst, cat = _ENTRY.unpack_from(
            data, off)
        off += _ENTRY.size
        layouts.append(LayoutEntry(frame=frame, view=view, cx=cx, cy=cy,
                                   sw=sw, sh=sh, heading=heading,
                                   instance_id=inst, category_id=cat))
    n_vid = v * t * c * h * w
    video = np.frombuffer(data, dtype="<f4", count=n_vid, offset=off)
    video = video.reshape(v, t, c, h, w).copy()
    off += n_vid * 4
    sketch = np.frombuffer(data, dtype=np.uint8, count=v * t * h * w,
                           offset=off).reshape(v, t, 1, h, w).copy()
    return SceneRecord(video=video, layouts=layouts, sketch=sketch,
                       caption=caption)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def bucket_key(height: int, width: int, frames: int) -> str:
    return f"{height}x{width}xT{frames}"


def make_dataset(n_scenes: int, seed: int, out_path,
                 frame_buckets: Sequence[int] = (16, 8), height: int = 32,
                 width: int = 32, n_views: int = 6) -> Path:
    """Render n scenes with a splittable seed stream and write a manifest.

    Scenes cycle through the frame-length buckets so each bucket is
    populated. Byte-identical for identical (n, seed).
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    sub_seeds = np.random.SeedSequence(seed).spawn(n_scenes)
    lines = []
    for i, ss in enumerate(sub_seeds):
        scene_seed = int(ss.generate_state(1)[0])
        frames = frame_buckets[i % len(frame_buckets)]
        spec = sample_scene_spec(scene_seed, frames=frames, height=height,
                                 width=width, n_views=n_views)
        scene = generate_scene(spec)
        name = f"scene_{i:05d}.toyw"
        write_scene(out / name, scene.video, scene.layouts, scene.sketch,
                    scene.caption)
        lines.append("\t".join([
            name, bucket_key(height, width, frames), _sha256(out / name)]))
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(manifest_path) -> list:
    """[(path, bucket key, checksum)] rows; paths resolved to the manifest dir."""
    manifest_path = Path(manifest_path)
    rows = []
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, bucket, checksum = line.split("\t")
        rows.append((manifest_path.parent / name, bucket, checksum))
    return rows
