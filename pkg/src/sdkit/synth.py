"""Deterministic synthetic street-like scenes for desk-scale training.

A pinhole camera looks over a ground plane at boxes and spheres, with a far
backdrop so every pixel has a finite depth.  Depth is the camera z coordinate
(as in KITTI), not ray length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depth_io import Sample, SparseDepthMap, write_sample

NEAR_LIMIT = 20.0


@dataclass(frozen=True)
class Box:
    x0: float
    x1: float
    y0: float
    y1: float
    z0: float
    z1: float
    albedo: tuple = (0.8, 0.2, 0.2)


@dataclass(frozen=True)
class Sphere:
    cx: float
    cy: float
    cz: float
    radius: float
    albedo: tuple = (0.2, 0.2, 0.8)


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 256
    camera_height: float = 1.65  # ground plane distance below the camera, meters
    tilt: float = 0.0            # ground pitch, radians
    focal: float = 0.0           # 0 -> width / 2
    cx: float = -1.0             # < 0 -> width / 2
    cy: float = -1.0             # < 0 -> 0.4 * height
    d_max: float = 80.0
    primitives: list = field(default_factory=list)

    def __post_init__(self):
        if self.focal == 0.0:
            self.focal = self.width / 2.0
        if self.cx < 0:
            self.cx = self.width / 2.0
        if self.cy < 0:
            self.cy = 0.4 * self.height

    def validate(self):
        if self.height % 8 or self.width % 8:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by 8")
        if self.focal <= 0 or not np.isfinite(self.focal):
            raise ValueError(f"degenerate camera: focal length {self.focal}")
        if self.camera_height <= 0:
            raise ValueError("camera must sit above the ground plane")
        if self.d_max <= 2.0:
            raise ValueError("d_max must exceed the 2 m near bound")


def random_scene(seed: int, height=64, width=256, d_max=80.0, near_fraction=0.7) -> SceneSpec:
    """Scene with 4-10 primitives, ``near_fraction`` of them within 20 m."""
    rng = np.random.default_rng(seed)
    spec = SceneSpec(seed=seed, height=height, width=width, d_max=d_max,
                     camera_height=float(rng.uniform(1.5, 1.8)),
                     tilt=float(rng.uniform(-0.02, 0.02)))
    half_fov = spec.cx / spec.focal
    prims = []
    for _ in range(int(rng.integers(4, 11))):
        near = rng.random() < near_fraction
        z = rng.uniform(3.0, NEAR_LIMIT) if near else rng.uniform(NEAR_LIMIT, 0.85 * d_max)
        x = rng.uniform(-0.9, 0.9) * z * half_fov
        albedo = tuple(float(a) for a in rng.uniform(0.1, 0.95, size=3))
        if rng.random() < 0.7:
            w, h, dz = rng.uniform(0.8, 3.0), rng.uniform(0.8, 3.0), rng.uniform(0.5, 3.0)
            ground = spec.camera_height
            prims.append(Box(x - w / 2, x + w / 2, ground - h, ground, z, z + dz, albedo))
        else:
            r = rng.uniform(0.4, 1.5)
            prims.append(Sphere(x, spec.camera_height - r, z + r, r, albedo))
    spec.primitives = prims
    return spec


def _ray_dirs(spec: SceneSpec):
    v, u = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    return (u - spec.cx) / spec.focal, (v - spec.cy) / spec.focal


def _hit_box(b: Box, dx, dy):
    t_lo = np.full(dx.shape, b.z0)
    t_hi = np.full(dx.shape, b.z1)
    with np.errstate(divide="ignore", invalid="ignore"):
        for lo, hi, d in ((b.x0, b.x1, dx), (b.y0, b.y1, dy)):
            a, c = lo / d, hi / d
            near, far = np.minimum(a, c), np.maximum(a, c)
            inside = (lo <= 0) & (0 <= hi)
            near = np.where(d == 0, np.where(inside, -np.inf, np.inf), near)
            far = np.where(d == 0, np.where(inside, np.inf, -np.inf), far)
            t_lo = np.maximum(t_lo, near)
            t_hi = np.minimum(t_hi, far)
    return np.where((t_lo <= t_hi) & (t_lo > 0), t_lo, np.inf)


def _hit_sphere(s: Sphere, dx, dy):
    a = dx * dx + dy * dy + 1.0
    b = -2.0 * (dx * s.cx + dy * s.cy + s.cz)
    c = s.cx ** 2 + s.cy ** 2 + s.cz ** 2 - s.radius ** 2
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def render(spec: SceneSpec):
    """Ray-cast ``(color 3 x H x W in [0,1], depth H x W meters)``."""
    spec.validate()
    dx, dy = _ray_dirs(spec)
    # ground: points p with cos(tilt) * y - sin(tilt) * z = camera_height
    denom = np.cos(spec.tilt) * dy - np.sin(spec.tilt)
    with np.errstate(divide="ignore"):
        t_ground = np.where(denom > 0, spec.camera_height / denom, np.inf)
    depth = np.minimum(t_ground, spec.d_max)
    ident = np.where(t_ground < spec.d_max, 0, 1)  # 0 ground, 1 backdrop, 2+ primitives
    for k, prim in enumerate(spec.primitives):
        t = _hit_box(prim, dx, dy) if isinstance(prim, Box) else _hit_sphere(prim, dx, dy)
        closer = t < depth
        depth = np.where(closer, t, depth)
        ident = np.where(closer, k + 2, ident)

    albedo = np.empty((3,) + depth.shape)
    stripe = (np.floor(depth / 2.0) % 2) * 0.08
    ground = np.array([0.42, 0.44, 0.40])[:, None, None] + stripe
    rows = np.linspace(0.0, 1.0, spec.height)[:, None]
    sky = np.stack([0.55 + 0.2 * rows, 0.7 + 0.15 * rows, 0.95 + 0 * rows])
    albedo[:] = np.where(ident == 0, ground, np.broadcast_to(sky, albedo.shape))
    for k, prim in enumerate(spec.primitives):
        sel = ident == k + 2
        albedo[:, sel] = np.asarray(prim.albedo)[:, None]
    shade = 0.55 + 0.45 * np.exp(-depth / 30.0)
    color = np.clip(albedo * np.where(ident == 1, 1.0, shade), 0.0, 1.0)
    return color, depth


def sparsify(dense, density: float, pattern: str = "uniform", seed: int = 0) -> SparseDepthMap:
    """Keep ``round(density * H * W)`` pixels of ``dense``.

    ``uniform`` picks pixels independently of position; ``scanline`` spreads
    them along slightly curved near-horizontal lines like a spinning LiDAR.
    """
    if not 0 < density <= 1:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    dense = np.asarray(dense, dtype=np.float64)
    h, w = dense.shape
    total = int(round(density * h * w))
    rng = np.random.default_rng(seed)
    keep = np.zeros(h * w, dtype=bool)
    if pattern == "uniform" or total >= h * w:
        keep[rng.choice(h * w, size=total, replace=False)] = True
    elif pattern == "scanline":
        lines = int(min(h, max(1, np.ceil(np.sqrt(density) * h * 1.5))))
        rows0 = np.linspace(0, h - 1, lines)
        u = np.arange(w)
        bend = rng.uniform(-1.5, 1.5) * ((u - w / 2) / (w / 2)) ** 2
        per_line = np.full(lines, total // lines)
        per_line[: total - per_line.sum()] += 1
        grid = np.zeros((h, w), dtype=bool)
        for r0, n in zip(rows0, per_line):
            rows = np.clip(np.rint(r0 + bend).astype(int), 0, h - 1)
            free = np.flatnonzero(~grid[rows, u])
            cols = rng.choice(free, size=min(n, free.size), replace=False)
            grid[rows[cols], cols] = True
        short = total - int(grid.sum())
        if short > 0:
            grid.flat[rng.choice(np.flatnonzero(~grid), size=short, replace=False)] = True
        keep = grid.reshape(-1)
    else:
        raise ValueError(f"unknown sparsity pattern {pattern!r}")
    return SparseDepthMap(np.where(keep.reshape(h, w), dense, 0.0))


@dataclass
class AugmentConfig:
    jitter: float = 0.1
    flip_prob: float = 0.5

    def __post_init__(self):
        if not 0 <= self.jitter <= 0.2:
            raise ValueError("jitter amplitude must lie in [0, 0.2]")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip probability must lie in [0, 1]")


def augment(color, sparse, gt, config: AugmentConfig, seed):
    """Joint horizontal flip of all three maps plus color-only jitter.

    Depth values are never altered; flipping only permutes pixels.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    color = np.asarray(color)
    sp = np.asarray(getattr(sparse, "depth", sparse))
    g = np.asarray(getattr(gt, "depth", gt))
    flip = rng.random() < config.flip_prob
    factors = rng.uniform(1 - config.jitter, 1 + config.jitter, size=3)
    if flip:
        color, sp, g = color[..., ::-1], sp[..., ::-1], g[..., ::-1]
    if config.jitter > 0:
        bright, contrast, sat = factors
        c = color * bright
        c = (c - c.mean()) * contrast + c.mean()
        gray = c.mean(axis=0, keepdims=True)
        color = np.clip((c - gray) * sat + gray, 0.0, 1.0).astype(np.asarray(color).dtype)
    wrap = (lambda a, like: SparseDepthMap(a) if isinstance(like, SparseDepthMap) else a)
    return (np.ascontiguousarray(color), wrap(np.ascontiguousarray(sp), sparse),
            wrap(np.ascontiguousarray(g), gt))


def make_sample(seed: int, height=64, width=256, sparse_density=0.04, gt_density=0.16,
                d_max=80.0, sparse_pattern="scanline", gt_pattern="uniform") -> Sample:
    color, depth = render(random_scene(seed, height, width, d_max))
    # independent draws from the same dense map
    sparse = sparsify(depth, sparse_density, sparse_pattern, seed=2 * seed + 1)
    gt = sparsify(depth, gt_density, gt_pattern, seed=2 * seed + 2)
    return Sample(color=color, sparse=sparse, gt=gt, name=f"scene_{seed:06d}")


def split_counts(n_scenes: int) -> dict:
    """80/10/10 partition (160/20/20 for 200 scenes)."""
    n_val = n_test = n_scenes // 10
    return {"train": n_scenes - n_val - n_test, "val": n_val, "test": n_test}


def generate_dataset(root, n_scenes=200, height=64, width=256, sparse_density=0.04,
                     gt_density=0.16, seed=0, d_max=80.0) -> dict:
    """Write ``n_scenes`` scenes in the depth-io layout; scene seeds are ``seed * 100003 + i``."""
    counts = split_counts(n_scenes)
    i = 0
    for split, count in counts.items():
        for _ in range(count):
            s = make_sample(seed * 100003 + i, height, width, sparse_density, gt_density, d_max)
            write_sample(root, split, f"scene_{i:05d}", 0, s)
            i += 1
    return counts


def generate_in_memory(n_scenes=200, height=64, width=256, sparse_density=0.04,
                       gt_density=0.16, seed=0, d_max=80.0) -> dict:
    counts = split_counts(n_scenes)
    out, i = {}, 0
    for split, count in counts.items():
        out[split] = []
        for _ in range(count):
            out[split].append(make_sample(seed * 100003 + i, height, width,
                                          sparse_density, gt_density, d_max))
            i += 1
    return out


def scene_dirs(root) -> list[Path]:
    return sorted(p for p in Path(root).glob("*/*") if p.is_dir())
