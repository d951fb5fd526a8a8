"""KITTI depth PNG codec and dataset directory layout.

Depth maps are single-channel 16-bit PNGs holding ``round(depth_m * 256)``;
0 marks an invalid pixel.  Color images are 8-bit RGB PNGs.  A dataset is laid
out as ``<root>/<split>/<scene>/{image,sparse,groundtruth}/NNNNNNNNNN.png``.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_SCALE = 256.0
MAX_DEPTH = 65535 / DEPTH_SCALE
SUBDIRS = ("image", "sparse", "groundtruth")
_PNG_SIG = b"\x89PNG\r\n\x1a\n"


class DepthFormatError(ValueError):
    pass


@dataclass
class SparseDepthMap:
    """Depth in meters with 0 at invalid pixels."""

    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError(f"depth map must be H x W, got {self.depth.shape}")
        if (self.depth < 0).any() or not np.isfinite(self.depth).all():
            raise ValueError("depth must be finite and non-negative")

    @property
    def mask(self) -> np.ndarray:
        return (self.depth > 0).astype(np.uint8)

    @property
    def density(self) -> float:
        return float(self.mask.mean())

    @property
    def shape(self):
        return self.depth.shape


def _png_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIG or head[12:16] != b"IHDR":
        raise DepthFormatError(f"{path}: not a PNG file")
    bit_depth, color_type = struct.unpack(">BB", head[24:26])
    return bit_depth, color_type


def _atomic_bytes(path: Path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def read_depth_png(path) -> SparseDepthMap:
    bit_depth, color_type = _png_header(path)
    if bit_depth != 16 or color_type != 0:
        raise DepthFormatError(
            f"{path}: expected single-channel 16-bit PNG, got bit depth {bit_depth}, "
            f"color type {color_type}")
    with Image.open(path) as img:
        raw = np.array(img, dtype=np.uint16)
    return SparseDepthMap(raw.astype(np.float64) / DEPTH_SCALE)


def encode_depth(depth) -> np.ndarray:
    d = np.asarray(getattr(depth, "depth", depth), dtype=np.float64)
    d = np.clip(np.nan_to_num(d, nan=0.0, posinf=MAX_DEPTH), 0.0, MAX_DEPTH)
    return np.rint(d * DEPTH_SCALE).astype(np.uint16)


def write_depth_png(depth, path) -> None:
    """Encode meters as ``round(d * 256)``; depths beyond the format range are clamped."""
    raw = encode_depth(depth)
    if raw.ndim != 2:
        raise ValueError(f"depth map must be H x W, got {raw.shape}")
    _atomic_bytes(Path(path), _png_bytes(Image.fromarray(raw)))


def read_color_png(path) -> np.ndarray:
    """8-bit RGB PNG to a float ``3 x H x W`` array in [0, 1]."""
    bit_depth, color_type = _png_header(path)
    if bit_depth != 8 or color_type != 2:
        raise DepthFormatError(
            f"{path}: expected 8-bit RGB PNG, got bit depth {bit_depth}, color type {color_type}")
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.uint8)
    return (arr.astype(np.float64) / 255.0).transpose(2, 0, 1)


def write_color_png(color, path) -> None:
    c = np.asarray(color, dtype=np.float64)
    if c.ndim != 3 or c.shape[0] != 3:
        raise ValueError(f"color image must be 3 x H x W, got {c.shape}")
    raw = np.rint(np.clip(c, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    _atomic_bytes(Path(path), _png_bytes(Image.fromarray(np.ascontiguousarray(raw), "RGB")))


def write_rgb_png(rgb: np.ndarray, path) -> None:
    """Write an ``H x W x 3`` uint8 array."""
    _atomic_bytes(Path(path), _png_bytes(Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB")))


@dataclass
class Sample:
    color: np.ndarray          # 3 x H x W, [0, 1]
    sparse: SparseDepthMap
    gt: SparseDepthMap
    name: str = ""


def frame_name(index: int) -> str:
    return f"{index:010d}.png"


def write_sample(root, split: str, scene: str, frame: int, sample: Sample) -> None:
    base = Path(root) / split / scene
    write_color_png(sample.color, base / "image" / frame_name(frame))
    write_depth_png(sample.sparse, base / "sparse" / frame_name(frame))
    write_depth_png(sample.gt, base / "groundtruth" / frame_name(frame))


def list_frames(root, split: str) -> list[tuple[str, str]]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no split directory {split_dir}")
    frames = []
    for scene in sorted(p.name for p in split_dir.iterdir() if p.is_dir()):
        for f in sorted((split_dir / scene / "groundtruth").glob("*.png")):
            frames.append((scene, f.name))
    return frames


def load_split(root, split: str) -> list[Sample]:
    out = []
    for scene, fname in list_frames(root, split):
        base = Path(root) / split / scene
        out.append(Sample(
            color=read_color_png(base / "image" / fname),
            sparse=read_depth_png(base / "sparse" / fname),
            gt=read_depth_png(base / "groundtruth" / fname),
            name=f"{scene}/{fname}",
        ))
    return out
