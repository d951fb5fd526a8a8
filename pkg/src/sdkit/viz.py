"""Color-mapped depth/confidence exports and matplotlib report figures.

Color mapping uses fixed 256-entry lookup tables shipped with the package so
exported PNGs are bit-exact regardless of the installed matplotlib.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .depth_io import write_rgb_png

CONFIDENCE_LIMIT = 4.0


@lru_cache(maxsize=None)
def load_lut(name: str) -> np.ndarray:
    """``256 x 3`` uint8 table; ``name`` is ``depth_turbo`` or ``confidence_diverging``."""
    text = resources.files("sdkit.data").joinpath(f"{name}_lut.csv").read_text()
    rows = [line.split(",") for line in text.splitlines()[1:] if line]
    lut = np.array([[int(r), int(g), int(b)] for _, r, g, b in rows], dtype=np.uint8)
    if lut.shape != (256, 3):
        raise ValueError(f"LUT {name} has shape {lut.shape}")
    return lut


def _index(values, lo, hi) -> np.ndarray:
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=lo)
    return np.rint(np.clip((v - lo) / (hi - lo), 0.0, 1.0) * 255).astype(np.uint8)


def colorize_depth(depth, d_max: float = 80.0) -> np.ndarray:
    """``H x W`` meters to ``H x W x 3`` uint8 through the turbo-style table."""
    return load_lut("depth_turbo")[_index(depth, 0.0, d_max)]


def colorize_confidence(conf, limit: float = CONFIDENCE_LIMIT) -> np.ndarray:
    """Logits in ``[-limit, limit]`` through the blue-white-red table; 0 maps near white."""
    return load_lut("confidence_diverging")[_index(conf, -limit, limit)]


DUMP_MAPS = (("d_c", "depth"), ("d_cr", "depth"), ("d_dr", "depth"),
             ("c_cr_adj", "confidence"), ("c_dr_adj", "confidence"), ("d_f", "depth"))


def dump_intermediates(maps: dict, directory, d_max: float = 80.0) -> list[Path]:
    """Write the coarse, branch, guided-confidence and final maps as color PNGs.

    ``maps`` holds ``H x W`` arrays keyed like :class:`~sdkit.network.NetworkOutput`
    fields; missing confidence adjustments fall back to the raw confidences.
    """
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, kind in DUMP_MAPS:
        arr = maps.get(key)
        if arr is None and key.endswith("_adj"):
            arr = maps.get(key[:-4])
        if arr is None:
            continue
        rgb = colorize_depth(arr, d_max) if kind == "depth" else colorize_confidence(arr)
        path = out_dir / f"{key}.png"
        write_rgb_png(rgb, path)
        written.append(path)
    return written


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_panels(maps: dict, path, d_max: float = 80.0, title: str | None = None):
    """Stacked panels: coarse, color-branch, depth-branch and final depth plus confidences."""
    plt = _pyplot()
    keys = [k for k, _ in DUMP_MAPS if maps.get(k) is not None]
    fig, axes = plt.subplots(len(keys), 1, figsize=(8, 1.4 * len(keys) + 0.4), squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        if key.startswith("c_"):
            im = ax.imshow(maps[key], cmap="RdBu_r", vmin=-CONFIDENCE_LIMIT, vmax=CONFIDENCE_LIMIT)
        else:
            im = ax.imshow(maps[key], cmap="turbo", vmin=0, vmax=d_max)
        ax.set_ylabel(key, rotation=0, ha="right", va="center")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.025, pad=0.01)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_history(history, path):
    """Training loss and validation RMSE per epoch."""
    plt = _pyplot()
    epochs = [r.epoch for r in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.2))
    a1.plot(epochs, [r.train_loss for r in history], marker="o", ms=3)
    a1.set_xlabel("epoch")
    a1.set_ylabel("train loss [m$^2$]")
    a1.set_yscale("log")
    val = [(r.epoch, r.val.rmse_mm) for r in history if r.val is not None]
    if val:
        a2.plot(*zip(*val), marker="o", ms=3, color="C1")
    a2.set_xlabel("epoch")
    a2.set_ylabel("val RMSE [mm]")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_ablation(rows, path):
    """Bar chart of validation RMSE and MAE per ablation variant."""
    plt = _pyplot()
    ok = [r for r in rows if r.report is not None]
    labels = [r.variant for r in ok]
    x = np.arange(len(ok))
    fig, ax = plt.subplots(figsize=(7, 3.4))
    ax.bar(x - 0.2, [r.report.rmse_mm for r in ok], 0.4, label="RMSE")
    ax.bar(x + 0.2, [r.report.mae_mm for r in ok], 0.4, label="MAE")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=15)
    ax.set_ylabel("error [mm]")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
