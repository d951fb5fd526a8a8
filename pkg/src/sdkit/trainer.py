"""Training loop, Adam with decoupled weight decay, LR schedule and the ablation protocol."""

from __future__ import annotations

import dataclasses
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .config import VARIANTS, NetConfig, TrainConfig
from .core.tensor import backward, no_grad
from .depth_io import Sample
from .fusion import NonFiniteInputError
from .losses import LossSchedule, MetricReport
from .network import (DepthCompletionNet, load_weights, read_tensors, save_checkpoint)
from .synth import AugmentConfig, augment

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "c_first", "train_loss", "val_iRMSE", "val_iMAE", "val_RMSE", "val_MAE")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def lr_at(epoch: int, config: TrainConfig | None = None) -> float:
    """Step decay: the initial rate halves every ``lr_halving_period`` epochs (1-based)."""
    cfg = config or TrainConfig()
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    return cfg.lr_initial * 0.5 ** ((epoch - 1) // cfg.lr_halving_period)


def schedule_for(cfg: TrainConfig) -> LossSchedule:
    return LossSchedule(cfg.c_first_initial, cfg.c_first_zero_epoch, cfg.c_first_interpolation)


def adam_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=0.0):
    """One in-place Adam update with bias correction and decoupled weight decay.

    Returns the updated ``(param, m, v)`` arrays (the same objects, modified).
    """
    if step < 1:
        raise ValueError("Adam steps are 1-based")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    decay = lr * weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        param -= decay
    return param, m, v


class Adam:
    def __init__(self, named_params, config: TrainConfig):
        self.params = dict(named_params)
        self.cfg = config
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def step(self, lr: float):
        self.step_count += 1
        c = self.cfg
        for k, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad.astype(p.dtype, copy=False), self.m[k], self.v[k],
                      self.step_count, lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay)

    def state(self) -> dict:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        out["step"] = np.array(self.step_count, dtype=np.float32)
        return out

    def load_state(self, state: dict):
        for k in self.params:
            self.m[k] = state[f"m.{k}"].astype(self.params[k].dtype)
            self.v[k] = state[f"v.{k}"].astype(self.params[k].dtype)
        self.step_count = int(state["step"])


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in params if p.grad is not None))
    if not math.isfinite(total):
        raise DivergenceError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def stack_batch(samples, dtype):
    color = np.stack([s.color for s in samples]).astype(dtype)
    sparse = np.stack([np.asarray(getattr(s.sparse, "depth", s.sparse)) for s in samples])[:, None]
    gt = np.stack([np.asarray(getattr(s.gt, "depth", s.gt)) for s in samples])[:, None]
    return color, sparse.astype(dtype), gt.astype(dtype)


def _epoch_rng(seed: int, epoch: int, stream: int = 0):
    return np.random.default_rng([seed, epoch, stream])


def _batches(train: list[Sample], cfg: TrainConfig, epoch: int, dtype):
    order = _epoch_rng(cfg.seed, epoch).permutation(len(train))
    aug = AugmentConfig(cfg.jitter, cfg.flip_prob)
    for start in range(0, len(order), cfg.batch_size):
        items = []
        for idx in order[start:start + cfg.batch_size]:
            s = train[idx]
            if cfg.augment:
                c, sp, g = augment(s.color, s.sparse.depth, s.gt.depth, aug,
                                   _epoch_rng(cfg.seed, epoch, 1 + int(idx)))
                s = Sample(c, sp, g, s.name)
            items.append(s)
        yield stack_batch(items, dtype)


def _prefetch(gen, depth=2):
    """Run a batch generator on a worker thread; order is preserved."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def work():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def clamp_depth(d: np.ndarray, d_max: float) -> np.ndarray:
    return np.clip(d, 0.0, d_max)


def predict(net: DepthCompletionNet, samples: list[Sample], batch_size=8):
    """Final depth (clamped to [0, d_max]) for each sample, without recording a graph."""
    preds = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            color, sparse, _ = stack_batch(samples[start:start + batch_size], net.dtype)
            out = net(color, sparse)
            preds.extend(clamp_depth(out.d_f.data[:, 0], net.config.d_max))
    return preds


def validate(net: DepthCompletionNet, samples: list[Sample], batch_size=8) -> MetricReport:
    preds = predict(net, samples, batch_size)
    return losses.mean_report(losses.evaluate(p, s.gt) for p, s in zip(preds, samples))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    c_first: float
    train_loss: float
    val: MetricReport | None

    def csv_row(self) -> str:
        vals = self.val.values() if self.val else (float("nan"),) * 4
        return ",".join([str(self.epoch), f"{self.lr:.9g}", f"{self.c_first:.9g}",
                         f"{self.train_loss:.9g}"] + [f"{v:.9g}" for v in vals])


@dataclass
class TrainResult:
    net: DepthCompletionNet
    history: list = field(default_factory=list)
    best_rmse: float = float("inf")
    best_epoch: int = 0
    out_dir: Path | None = None
    diverged: bool = False

    def log_csv(self) -> str:
        return ",".join(LOG_COLUMNS) + "\n" + "".join(r.csv_row() + "\n" for r in self.history)


def _save_state(path: Path, net, opt: Adam, epoch: int, best_rmse: float, best_epoch: int):
    extra = opt.state()
    extra["epoch"] = np.array(epoch, dtype=np.float32)
    extra["best_rmse"] = np.array(best_rmse if math.isfinite(best_rmse) else -1.0, dtype=np.float32)
    extra["best_epoch"] = np.array(best_epoch, dtype=np.float32)
    save_checkpoint(net, path, extra=extra)


def train(train_set: list[Sample], net_cfg: NetConfig, cfg: TrainConfig,
          val_set: list[Sample] | None = None, out_dir=None, resume_from=None,
          on_epoch=None) -> TrainResult:
    """Train one network.  Checkpoints ``last/`` every epoch and ``best/`` on
    validation RMSE improvement when ``out_dir`` is given.

    Raises :class:`DivergenceError` on a non-finite loss; the last good
    checkpoint on disk is left untouched.
    """
    if not train_set:
        raise ValueError("training set is empty")
    dtype = np.dtype(cfg.dtype)
    net = DepthCompletionNet(net_cfg, dtype=dtype)
    opt = Adam(net.named_parameters(), cfg)
    result = TrainResult(net=net, out_dir=Path(out_dir) if out_dir else None)
    start_epoch = 1
    if resume_from is not None:
        rd = Path(resume_from)
        load_weights(net, read_tensors(rd / "manifest.txt", rd / "weights.bin"))
        state = read_tensors(rd / "state_manifest.txt", rd / "state.bin")
        opt.load_state(state)
        start_epoch = int(state["epoch"]) + 1
        result.best_epoch = int(state["best_epoch"])
        best = float(state["best_rmse"])
        result.best_rmse = best if best >= 0 else float("inf")
        log_path = rd.parent / "train_log.csv"
        if log_path.exists():
            result.history = _read_history(log_path, start_epoch)
    schedule = schedule_for(cfg)
    params = net.parameters()

    for epoch in range(start_epoch, cfg.epochs + 1):
        lr, c_first = lr_at(epoch, cfg), schedule(epoch)
        batches = _batches(train_set, cfg, epoch, dtype)
        if not cfg.deterministic:
            batches = _prefetch(batches)
        total, count = 0.0, 0
        t0 = time.perf_counter()
        for color, sparse, gt in batches:
            net.zero_grad()
            try:
                out = net(color, sparse)
            except NonFiniteInputError as exc:
                result.diverged = True
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            loss = losses.total_loss(out.d_c, out.d_f, gt, epoch, schedule)
            value = float(loss.data)
            if not math.isfinite(value):
                result.diverged = True
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            backward(loss)
            clip_gradients(params, cfg.grad_clip)
            opt.step(lr)
            total += value * len(color)
            count += len(color)
        val = validate(net, val_set, cfg.batch_size) if val_set else None
        rec = EpochRecord(epoch, lr, c_first, total / count, val)
        result.history.append(rec)
        log.info("epoch %d lr %.3g loss %.4f val RMSE %s (%.1fs)", epoch, lr, rec.train_loss,
                 f"{val.rmse_mm:.1f}" if val else "-", time.perf_counter() - t0)
        if val is not None and val.rmse_mm < result.best_rmse:
            result.best_rmse, result.best_epoch = val.rmse_mm, epoch
            if result.out_dir:
                save_checkpoint(net, result.out_dir / "best")
        if result.out_dir:
            _save_state(result.out_dir / "last", net, opt, epoch, result.best_rmse, result.best_epoch)
            (result.out_dir / "train_log.csv").write_text(result.log_csv())
        if on_epoch:
            on_epoch(rec)
    return result


def _read_history(path: Path, before_epoch: int) -> list:
    rows = path.read_text().splitlines()[1:]
    out = []
    for row in rows:
        f = row.split(",")
        if int(f[0]) >= before_epoch:
            break
        vals = [float(x) for x in f[4:8]]
        val = None if any(math.isnan(x) for x in vals) else MetricReport(*vals, valid_pixel_count=0)
        out.append(EpochRecord(int(f[0]), float(f[1]), float(f[2]), float(f[3]), val))
    return out


@dataclass
class AblationRow:
    variant: str
    params: int
    report: MetricReport | None
    diverged: bool = False
    seconds: float = 0.0


def run_ablation(train_set, val_set, net_cfg: NetConfig, cfg: TrainConfig,
                 variants=VARIANTS, out_dir=None) -> list[AblationRow]:
    """Train each variant from the same seed and report its best validation epoch.

    A diverging variant is kept in the table with ``diverged=True``.
    """
    rows = []
    for variant in variants:
        vcfg = dataclasses.replace(net_cfg, variant=variant)
        t0 = time.perf_counter()
        sub = Path(out_dir) / variant.replace("+", "_") if out_dir else None
        try:
            res = train(train_set, vcfg, cfg, val_set=val_set, out_dir=sub)
            # same selection rule as the retained best checkpoint
            report = min((h.val for h in res.history if h.val is not None),
                         key=lambda r: r.rmse_mm)
            rows.append(AblationRow(variant, res.net.num_parameters(), report,
                                    seconds=time.perf_counter() - t0))
        except DivergenceError as exc:
            log.warning("variant %s diverged: %s", variant, exc)
            params = DepthCompletionNet(vcfg).num_parameters()
            rows.append(AblationRow(variant, params, None, True, time.perf_counter() - t0))
    return rows


def ablation_csv(rows) -> str:
    lines = ["variant,params,iRMSE,iMAE,RMSE,MAE,status"]
    for r in rows:
        if r.report is None:
            lines.append(f"{r.variant},{r.params},,,,,diverged")
        else:
            lines.append(f"{r.variant},{r.params},{r.report.csv_row()},ok")
    return "\n".join(lines) + "\n"
