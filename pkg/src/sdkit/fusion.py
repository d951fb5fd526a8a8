"""Confidence-weighted fusion of the two refinement branches and confidence guidance.

Fusion is a per-pixel two-way softmax over branch confidences.  Guidance
raises color-branch confidence (and lowers depth-branch confidence by the same
amount) where the coarse depth has strong edges or lies far away.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.ops import edge_pad_adjoint
from .core.tensor import Tensor, as_tensor, make_node

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class NonFiniteInputError(ValueError):
    pass


@dataclass
class ConfidencePair:
    """Per-pixel confidence logits for the color (cr) and depth (dr) branches."""

    c_cr: Tensor
    c_dr: Tensor

    def __post_init__(self):
        self.c_cr = as_tensor(self.c_cr)
        self.c_dr = as_tensor(self.c_dr)
        if self.c_cr.shape != self.c_dr.shape:
            raise ValueError(f"confidence shapes differ: {self.c_cr.shape} vs {self.c_dr.shape}")


@dataclass
class GuidancePriors:
    boundary: Tensor
    farness: Tensor
    alpha: float

    @property
    def guidance(self) -> Tensor:
        return ops.add(self.boundary, self.farness)


def fuse(d_cr, d_dr, conf: ConfidencePair) -> Tensor:
    """``(e^c_cr * d_cr + e^c_dr * d_dr) / (e^c_cr + e^c_dr)`` per pixel.

    Exponents are shifted by the per-pixel max so any finite logits are safe in
    32-bit.  The result is clamped to the branch range, which is a no-op in exact
    arithmetic and removes last-ulp excursions.
    """
    d1, d2 = as_tensor(d_cr), as_tensor(d_dr)
    c1, c2 = conf.c_cr, conf.c_dr
    shapes = {t.shape for t in (d1, d2, c1, c2)}
    if len(shapes) != 1:
        raise ValueError(f"fuse needs matching shapes, got {[t.shape for t in (d1, d2, c1, c2)]}")
    for name, t in (("d_cr", d1), ("d_dr", d2), ("c_cr", c1), ("c_dr", c2)):
        if np.isnan(t.data).any():
            raise NonFiniteInputError(f"NaN in fusion input {name}")

    top = np.maximum(c1.data, c2.data)
    e1 = np.exp(c1.data - top)
    e2 = np.exp(c2.data - top)
    den = e1 + e2
    out = (e1 * d1.data + e2 * d2.data) / den
    out = np.clip(out, np.minimum(d1.data, d2.data), np.maximum(d1.data, d2.data))
    w1, w2 = e1 / den, e2 / den

    def bw(g):
        # a saturated softmax leaves the losing branch with subnormal gradients
        gc = ops.flush_denormals(g * w1 * w2 * (d1.data - d2.data))
        return ops.flush_denormals(g * w1), ops.flush_denormals(g * w2), gc, -gc

    return make_node(out, (d1, d2, c1, c2), bw)


def fuse_final(d_cr, d_dr, adjusted: ConfidencePair) -> Tensor:
    """Fusion with guidance-adjusted confidences; same contract as :func:`fuse`."""
    return fuse(d_cr, d_dr, adjusted)


def _as_single_channel(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3 and x.shape[0] == 1:
        return x
    if x.ndim == 4 and x.shape[1] == 1:
        return x[:, 0]
    raise ValueError(f"Sobel filter needs single-channel input, got shape {x.shape}")


def sobel_gradients(d) -> tuple[np.ndarray, np.ndarray]:
    """Raw horizontal and vertical Sobel responses with replicate padding."""
    x = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    squeeze = x.ndim == 2
    imgs = _as_single_channel(x)
    h, w = imgs.shape[-2:]
    xp = np.pad(imgs, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = np.zeros_like(imgs)
    gy = np.zeros_like(imgs)
    for i in range(3):
        for j in range(3):
            win = xp[:, i:i + h, j:j + w]
            if SOBEL_X[i, j]:
                gx += SOBEL_X[i, j] * win
            if SOBEL_Y[i, j]:
                gy += SOBEL_Y[i, j] * win
    if squeeze:
        return gx[0], gy[0]
    return gx.reshape(x.shape), gy.reshape(x.shape)


def sobel_magnitude(d, percentile: float = 99.0) -> Tensor:
    """Edge strength in ``[0, 1]``: Sobel magnitude over its per-image percentile.

    When edges cover less than ``100 - percentile`` percent of an image the
    percentile is zero; the per-image maximum is used instead.  A flat image
    maps to zeros.
    """
    d = as_tensor(d)
    imgs = _as_single_channel(d.data)
    n, h, w = imgs.shape
    xp = np.pad(imgs, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = np.zeros_like(imgs)
    gy = np.zeros_like(imgs)
    for i in range(3):
        for j in range(3):
            win = xp[:, i:i + h, j:j + w]
            gx += SOBEL_X[i, j] * win
            gy += SOBEL_Y[i, j] * win
    mag = np.sqrt(gx * gx + gy * gy)
    # responses at rounding-noise level on flat regions are not edges
    noise = 1e-9 * np.abs(imgs).reshape(n, -1).max(axis=1)[:, None, None]
    mag = np.where(mag > noise, mag, 0.0)

    flat = mag.reshape(n, -1)
    size = flat.shape[1]
    pos = percentile / 100.0 * (size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, size - 1)
    frac = pos - lo
    scale = np.zeros(n, dtype=mag.dtype)
    taps = []  # per image: [(flat index, weight)] defining scale
    for b in range(n):
        order = np.argsort(flat[b], kind="stable")
        ilo, ihi = order[lo], order[hi]
        s = flat[b, ilo] + frac * (flat[b, ihi] - flat[b, ilo])
        tap = [(ilo, 1.0 - frac), (ihi, frac)]
        if s <= 0:
            imax = int(np.argmax(flat[b]))
            s, tap = flat[b, imax], [(imax, 1.0)]
        scale[b] = s
        taps.append(tap if s > 0 else [])
    safe = np.where(scale > 0, scale, 1.0)[:, None, None]
    ratio = np.where(scale[:, None, None] > 0, mag / safe, 0.0)
    out = np.clip(ratio, 0.0, 1.0).astype(d.dtype).reshape(d.shape)

    def bw(g):
        g = g.reshape(n, h, w).astype(np.float64)
        live = (ratio < 1.0) & (scale[:, None, None] > 0)
        g_mag = np.where(live, g / safe, 0.0)
        g_scale = -(np.where(live, g * mag, 0.0)).reshape(n, -1).sum(axis=1) / safe[:, 0, 0] ** 2
        gflat = g_mag.reshape(n, -1)
        for b in range(n):
            for idx, wt in taps[b]:
                gflat[b, idx] += wt * g_scale[b]
        nz = mag > 0
        safe_mag = np.where(nz, mag, 1.0)
        g_gx = np.where(nz, g_mag * gx / safe_mag, 0.0)
        g_gy = np.where(nz, g_mag * gy / safe_mag, 0.0)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + h, j:j + w] += SOBEL_X[i, j] * g_gx + SOBEL_Y[i, j] * g_gy
        gin = edge_pad_adjoint(gxp[:, None], 1)[:, 0]
        return (gin.reshape(d.shape).astype(d.dtype),)

    return make_node(out, (d,), bw)


def guidance_priors(d_c, alpha: float = 1.0, d_max: float = 80.0) -> GuidancePriors:
    d_c = as_tensor(d_c)
    boundary = sobel_magnitude(d_c)
    farness = ops.mul(ops.clip(d_c, 0.0, d_max), 1.0 / d_max)
    return GuidancePriors(boundary, farness, alpha)


def cgm(d_c, conf: ConfidencePair, alpha: float = 1.0, d_max: float = 80.0) -> ConfidencePair:
    """Shift confidence toward the color branch at edges and far range.

    ``C'_cr = C_cr + alpha * g`` and ``C'_dr = C_dr - alpha * g`` with
    ``g = boundary + farness``, so ``C'_cr + C'_dr`` is unchanged.
    """
    if alpha < 0:
        raise ValueError(f"guidance strength must be >= 0, got {alpha}")
    d_c = as_tensor(d_c)
    if d_c.shape != conf.c_cr.shape:
        raise ValueError(f"coarse depth shape {d_c.shape} != confidence shape {conf.c_cr.shape}")
    if alpha == 0:
        return conf
    g = ops.mul(guidance_priors(d_c, alpha, d_max).guidance, alpha)
    return ConfidencePair(ops.add(conf.c_cr, g), ops.sub(conf.c_dr, g))
