"""Two-stage depth completion network and its ablation variants.

Stage one predicts a coarse dense depth from color and sparse depth.  Stage two
refines it with a color branch and a depth branch, each emitting depth plus a
confidence logit map, which are fused per pixel.  Variant ``B`` replaces stage
two with a single encoder-decoder over the concatenated inputs.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fusion
from .config import NetConfig, dump_flat, load_config
from .core import ops
from .core.layers import (ConvLayer, Downsample, Module, ResidualBlock, Upsample, conv2d,
                          pointwise_conv, si_conv2d)
from .core.tensor import Parameter, Tensor, as_tensor


HEAD_INIT_SCALE = 0.01


class SFFMBlock(Module):
    """Shallow fusion: conv stack on the dense input, SI-conv stack on sparse depth,
    then a 1x1 conv over the concatenation."""

    def __init__(self, dense_channels, width, layers=2, eps=1e-8, rng=None, dtype=np.float64):
        self.color = [ConvLayer(dense_channels if i == 0 else width, width, 3, rng=rng, dtype=dtype)
                      for i in range(layers)]
        self.depth = [ConvLayer(1 if i == 0 else width, width, 3, rng=rng, dtype=dtype)
                      for i in range(layers)]
        self.fusion = ConvLayer(2 * width, width, 1, rng=rng, dtype=dtype)
        self.eps = eps

    def __call__(self, dense, sparse, mask):
        return sffm(dense, sparse, mask, self)


def sffm(dense, sparse, mask, block: SFFMBlock) -> Tensor:
    dense, sparse = as_tensor(dense), as_tensor(sparse)
    if dense.shape[-2:] != sparse.shape[-2:]:
        raise ValueError(f"SFFM inputs differ in spatial size: {dense.shape} vs {sparse.shape}")
    c = dense
    for layer in block.color:
        c = ops.relu(conv2d(c, layer))
    d, m = sparse, mask
    for layer in block.depth:
        d, m = si_conv2d(d, m, layer, block.eps)
        d = ops.relu(d)
    return pointwise_conv(ops.concat([c, d], axis=-3), block.fusion)


class EncoderDecoder(Module):
    """Three-level U-shaped encoder-decoder with residual blocks and skip concatenation.

    Full resolution carries only the stem and the last upsampling conv; residual
    blocks live at 1/2, 1/4 and 1/8 scale.
    """

    def __init__(self, in_channels, out_channels, widths, rng=None, dtype=np.float64):
        w = widths
        self.stem = ConvLayer(in_channels, w[0], 3, rng=rng, dtype=dtype)
        self.down = [Downsample(w[i], w[i + 1], rng=rng, dtype=dtype) for i in range(3)]
        self.enc = [ResidualBlock(w[i + 1], rng=rng, dtype=dtype) for i in range(3)]
        self.up = [Upsample(w[i + 1], w[i], rng=rng, dtype=dtype) for i in range(3)]
        self.merge = [ConvLayer(2 * w[i], w[i], 1, rng=rng, dtype=dtype) for i in range(3)]
        self.dec = [ResidualBlock(w[i], rng=rng, dtype=dtype) for i in (1, 2)]
        self.head = ConvLayer(w[0], out_channels, 1, rng=rng, dtype=dtype)

    def features(self, x):
        h = ops.relu(conv2d(x, self.stem))
        skips = [h]
        for down, res in zip(self.down, self.enc):
            h = res(ops.relu(down(h)))
            skips.append(h)
        for level in (2, 1, 0):
            u = ops.relu(self.up[level](h))
            h = ops.relu(conv2d(ops.concat([u, skips[level]], axis=1), self.merge[level]))
            if level > 0:
                h = self.dec[level - 1](h)
        return h

    def __call__(self, x):
        x = as_tensor(x)
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(
                f"spatial size {h}x{w} must be divisible by 8; pad to "
                f"{-(-h // 8) * 8}x{-(-w // 8) * 8}")
        return pointwise_conv(self.features(x), self.head)


@dataclass
class NetworkOutput:
    d_c: Tensor
    d_f: Tensor  # final depth (guided fusion when enabled)
    d_cr: Tensor | None = None
    d_dr: Tensor | None = None
    c_cr: Tensor | None = None
    c_dr: Tensor | None = None
    c_cr_adj: Tensor | None = None
    c_dr_adj: Tensor | None = None

    def maps(self) -> dict:
        return {k: v for k, v in vars(self).items() if v is not None}


def _batch4(x, channels, dtype):
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None] if arr.shape[0] == channels else arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != channels:
        raise ValueError(f"expected {channels}-channel image, got shape {np.shape(x)}")
    return arr


class DepthCompletionNet(Module):
    """All four ablation variants behind one forward signature."""

    def __init__(self, config: NetConfig | None = None, dtype=np.float64):
        cfg = config or NetConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.init_seed)
        widths = cfg.widths
        sw = cfg.sffm_width or cfg.base_width
        kw = dict(rng=rng, dtype=dtype)
        if cfg.uses_sffm:
            self.sffm_cp = SFFMBlock(3, sw, cfg.sffm_layers, cfg.si_eps, **kw)
            self.cp = EncoderDecoder(sw, 1, widths, **kw)
        else:
            self.cp = EncoderDecoder(4, 1, widths, **kw)
        if cfg.variant == "B":
            self.refine = EncoderDecoder(5, 1, widths, **kw)
        else:
            self.cr = EncoderDecoder(4, 2, widths, **kw)
            if cfg.uses_sffm:
                self.sffm_dr = SFFMBlock(1, sw, cfg.sffm_layers, cfg.si_eps, **kw)
                self.dr = EncoderDecoder(sw, 2, widths, **kw)
            else:
                self.dr = EncoderDecoder(2, 2, widths, **kw)
        # no normalisation layers: start every head near zero so the first
        # predictions sit at the depth prior instead of exploding
        for head in self._heads():
            head.weight.data *= HEAD_INIT_SCALE
        self.cp.head.bias.data[:] = cfg.depth_prior / cfg.depth_scale

    def _heads(self):
        return [m.head for m in (getattr(self, n, None) for n in ("cp", "refine", "cr", "dr"))
                if m is not None]

    @property
    def dtype(self):
        return self.cp.stem.weight.dtype

    def _depth(self, head: Tensor, base: Tensor | None) -> Tensor:
        d = ops.mul(head, self.config.depth_scale)
        if base is not None and self.config.residual_refine:
            d = ops.add(base, d)
        return d

    def coarse(self, color, sparse, mask) -> Tensor:
        s = 1.0 / self.config.depth_scale
        if self.config.uses_sffm:
            feats = sffm(color, ops.mul(sparse, s), mask, self.sffm_cp)
        else:
            feats = ops.concat([color, ops.mul(sparse, s)], axis=1)
        return self._depth(self.cp(feats), None)

    def cr_forward(self, d_c, color):
        head = self.cr(ops.concat([ops.mul(d_c, 1.0 / self.config.depth_scale), color], axis=1))
        return self._depth(ops.channels(head, 0, 1), d_c), ops.channels(head, 1, 2)

    def dr_forward(self, d_c, sparse, mask):
        s = 1.0 / self.config.depth_scale
        if self.config.uses_sffm:
            feats = sffm(ops.mul(d_c, s), ops.mul(sparse, s), mask, self.sffm_dr)
        else:
            feats = ops.concat([ops.mul(d_c, s), ops.mul(sparse, s)], axis=1)
        head = self.dr(feats)
        return self._depth(ops.channels(head, 0, 1), d_c), ops.channels(head, 1, 2)

    def __call__(self, color, sparse) -> NetworkOutput:
        return self.forward(color, sparse)

    def forward(self, color, sparse) -> NetworkOutput:
        """``color``: N x 3 x H x W in [0, 1]; ``sparse``: N x 1 x H x W meters, 0 = invalid."""
        dtype = self.dtype
        color_t = as_tensor(color) if isinstance(color, Tensor) else Tensor(_batch4(color, 3, dtype))
        sparse_t = as_tensor(sparse) if isinstance(sparse, Tensor) else Tensor(_batch4(sparse, 1, dtype))
        if color_t.shape[-2:] != sparse_t.shape[-2:] or color_t.shape[0] != sparse_t.shape[0]:
            raise ValueError(f"color {color_t.shape} and sparse {sparse_t.shape} disagree")
        mask = (sparse_t.data > 0).astype(dtype)
        cfg = self.config

        d_c = self.coarse(color_t, sparse_t, mask)
        if cfg.variant == "B":
            s = 1.0 / cfg.depth_scale
            x = ops.concat([ops.mul(d_c, s), color_t, ops.mul(sparse_t, s)], axis=1)
            return NetworkOutput(d_c=d_c, d_f=self._depth(self.refine(x), d_c))

        d_cr, c_cr = self.cr_forward(d_c, color_t)
        d_dr, c_dr = self.dr_forward(d_c, sparse_t, mask)
        raw = fusion.ConfidencePair(c_cr, c_dr)
        out = NetworkOutput(d_c=d_c, d_f=None, d_cr=d_cr, d_dr=d_dr, c_cr=c_cr, c_dr=c_dr)
        if cfg.uses_cgm:
            adj = fusion.cgm(d_c, raw, cfg.cgm_alpha, cfg.d_max)
            out.c_cr_adj, out.c_dr_adj = adj.c_cr, adj.c_dr
            out.d_f = fusion.fuse_final(d_cr, d_dr, adj)
        else:
            out.d_f = fusion.fuse(d_cr, d_dr, raw)
        return out


# --- checkpoint I/O --------------------------------------------------------

def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensors(named: dict, manifest_path, payload_path):
    """Manifest lines ``key = d0xd1x... @ offset`` (offset in floats) plus a
    flat little-endian float32 payload."""
    lines, chunks, offset = [], [], 0
    for key, arr in named.items():
        arr = np.asarray(arr)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{key} = {shape} @ {offset}")
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        offset += arr.size
    _atomic_write(Path(manifest_path), ("\n".join(lines) + "\n").encode())
    _atomic_write(Path(payload_path), b"".join(chunks))


def read_tensors(manifest_path, payload_path) -> dict:
    flat = np.fromfile(payload_path, dtype="<f4")
    out = {}
    for line in Path(manifest_path).read_text().splitlines():
        if not line.strip():
            continue
        key, spec = (s.strip() for s in line.split("=", 1))
        shape_s, off_s = (s.strip() for s in spec.split("@"))
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        off = int(off_s)
        n = int(np.prod(shape)) if shape else 1
        if off + n > flat.size:
            raise ValueError(f"{key}: payload too short for offset {off} + {n}")
        out[key] = flat[off:off + n].reshape(shape).copy()
    return out


def save_checkpoint(net: DepthCompletionNet, directory, extra: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensors({k: p.data for k, p in net.named_parameters()},
                  d / "manifest.txt", d / "weights.bin")
    _atomic_write(d / "network.cfg", dump_flat(net.config).encode())
    if extra:
        write_tensors(extra, d / "state_manifest.txt", d / "state.bin")


def load_checkpoint(directory, dtype=np.float32) -> DepthCompletionNet:
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {d}")
    net_cfg, _ = load_config(d / "network.cfg", env={})
    net = DepthCompletionNet(net_cfg, dtype=dtype)
    load_weights(net, read_tensors(d / "manifest.txt", d / "weights.bin"))
    return net


def load_weights(net: Module, tensors: dict):
    params = dict(net.named_parameters())
    missing = set(params) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for key, p in params.items():
        if tensors[key].shape != p.shape:
            raise ValueError(f"{key}: checkpoint shape {tensors[key].shape} != {p.shape}")
        p.data = tensors[key].astype(p.dtype)


__all__ = ["DepthCompletionNet", "EncoderDecoder", "NetworkOutput", "Parameter", "SFFMBlock",
           "load_checkpoint", "read_tensors", "save_checkpoint", "sffm", "write_tensors"]
