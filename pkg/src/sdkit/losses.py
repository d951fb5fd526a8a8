"""Masked regression losses, the two-term loss schedule, and KITTI-style metrics."""

from __future__ import annotations

import io
from dataclasses import dataclass, fields

import numpy as np

from .core import ops
from .core.tensor import Tensor, as_tensor, make_node

INVERSE_DEPTH_FLOOR = 1e-3  # meters


def _gt_array(gt) -> np.ndarray:
    depth = getattr(gt, "depth", gt)
    return np.asarray(depth.data if isinstance(depth, Tensor) else depth)


def masked_mse(pred, gt) -> Tensor:
    """Mean squared error over pixels where ``gt > 0``; other pixels get zero gradient.

    For a batch the mean is taken over all valid pixels of the batch.
    """
    pred = as_tensor(pred)
    g = _gt_array(gt).astype(pred.dtype, copy=False)
    if g.shape != pred.shape:
        try:
            g = g.reshape(pred.shape)
        except ValueError:
            raise ValueError(f"prediction shape {pred.shape} vs ground truth {g.shape}") from None
    valid = g > 0
    count = int(valid.sum())
    if count == 0:
        raise ValueError("ground truth has no valid pixel; masked MSE is undefined")
    diff = np.where(valid, pred.data - g, 0).astype(pred.dtype, copy=False)
    out = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)

    def bw(gout):
        return ((2.0 / count) * gout * diff,)

    return make_node(out, (pred,), bw)


@dataclass(frozen=True)
class LossSchedule:
    """Weight of the coarse-depth loss term per (1-based) epoch."""

    c_first_initial: float = 0.3
    zero_epoch: int = 5
    interpolation: str = "linear"

    def __call__(self, epoch: int) -> float:
        if epoch < 1:
            raise ValueError(f"epochs are 1-based, got {epoch}")
        if epoch >= self.zero_epoch:
            return 0.0
        if self.interpolation == "step":
            return self.c_first_initial
        return self.c_first_initial * ((self.zero_epoch - epoch) / (self.zero_epoch - 1))


def total_loss(d_first, d_final, gt, epoch: int, schedule: LossSchedule | None = None) -> Tensor:
    """``C_first(epoch) * L_first + L_final``; the first term is dropped once its weight is 0."""
    schedule = schedule or LossSchedule()
    final = masked_mse(d_final, gt)
    c = schedule(epoch)
    if c == 0.0:
        return final
    return ops.add(ops.mul(masked_mse(d_first, gt), c), final)


@dataclass
class MetricReport:
    irmse_per_km: float
    imae_per_km: float
    rmse_mm: float
    mae_mm: float
    valid_pixel_count: int

    COLUMNS = ("iRMSE", "iMAE", "RMSE", "MAE")

    def values(self):
        return (self.irmse_per_km, self.imae_per_km, self.rmse_mm, self.mae_mm)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    def csv_header(self) -> str:
        return ",".join(self.COLUMNS)

    def csv_row(self) -> str:
        return ",".join(f"{v:.6f}" for v in self.values())

    def to_csv(self) -> str:
        return self.csv_header() + "\n" + self.csv_row() + "\n"


def evaluate(pred, gt) -> MetricReport:
    """Metrics for one image over ``V = {gt > 0}``; depths in meters.

    RMSE/MAE are reported in millimeters, iRMSE/iMAE in 1/km.  Predictions are
    floored at 1 mm before inversion.
    """
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    g = _gt_array(gt).astype(np.float64)
    p = p.reshape(g.shape) if p.size == g.size else p
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} vs ground truth {g.shape}")
    valid = g > 0
    n = int(valid.sum())
    if n == 0:
        raise ValueError("ground truth has no valid pixel")
    pv, gv = p[valid], g[valid]
    err_mm = (pv - gv) * 1000.0
    inv_err = 1000.0 / np.maximum(pv, INVERSE_DEPTH_FLOOR) - 1000.0 / gv
    return MetricReport(
        irmse_per_km=float(np.sqrt(np.mean(inv_err ** 2))),
        imae_per_km=float(np.mean(np.abs(inv_err))),
        rmse_mm=float(np.sqrt(np.mean(err_mm ** 2))),
        mae_mm=float(np.mean(np.abs(err_mm))),
        valid_pixel_count=n,
    )


def mean_report(reports) -> MetricReport:
    """Dataset metrics as the average of per-image metrics."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    vals = np.array([r.values() for r in reports], dtype=np.float64).mean(axis=0)
    return MetricReport(*map(float, vals), valid_pixel_count=sum(r.valid_pixel_count for r in reports))


def reports_csv(rows: dict) -> str:
    """CSV table keyed by a label column, metric columns in iRMSE,iMAE,RMSE,MAE order."""
    buf = io.StringIO()
    buf.write("label," + ",".join(MetricReport.COLUMNS) + "\n")
    for label, rep in rows.items():
        buf.write(f"{label},{rep.csv_row()}\n")
    return buf.getvalue()
