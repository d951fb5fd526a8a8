"""``sdkit`` command line: synth-gen, train, eval, infer, ablate.

Exit codes: 0 success, 2 usage error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, depth_io, losses, synth, trainer, viz
from .config import DESK_SCALE, VARIANTS, dump_flat, load_config
from .core.tensor import no_grad
from .network import load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
log = logging.getLogger("sdkit")


class DataError(Exception):
    pass


class RunManifest:
    """``manifest.txt`` written into every output directory."""

    def __init__(self, command: str, argv):
        self.command = command
        self.argv = list(argv)
        self.config = ""
        self.seed = None
        self.artifacts: list[str] = []
        self.notes: list[str] = []
        self.timings: dict[str, float] = {}
        self._t = time.perf_counter()

    def phase(self, name: str):
        now = time.perf_counter()
        self.timings[name] = now - self._t
        self._t = now

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"tool = sdkit {__version__}", f"python = {platform.python_version()}",
                 f"command = {self.command}", f"argv = {' '.join(self.argv)}",
                 f"seed = {self.seed}"]
        lines += [f"artifact = {a}" for a in self.artifacts]
        lines += [f"note = {n}" for n in self.notes]
        lines += [f"time.{k} = {v:.3f}" for k, v in self.timings.items()]
        lines += ["[config]", self.config.rstrip()]
        path.write_text("\n".join(lines) + "\n")


def _parse_size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise argparse.ArgumentTypeError(f"size {text} must be positive and divisible by 8")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sdkit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("synth-gen", help="generate a synthetic dataset in KITTI layout")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--scenes", type=int, default=200)
    g.add_argument("--size", type=_parse_size, default=(64, 256), help="HxW, divisible by 8")
    g.add_argument("--sparse-density", type=float, default=0.04)
    g.add_argument("--gt-density", type=float, default=0.16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")

    t = sub.add_parser("train", help="train one network variant")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--config", type=Path, help="flat key = value config file")
    t.add_argument("--variant", choices=VARIANTS, default=None)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--deterministic", action="store_true", help="fully sequential execution")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--full-scale", action="store_true",
                   help="full-size network and batch (base width 32, batch 8) instead of desk scale")
    t.add_argument("--resume", type=Path, help="checkpoint directory (…/last) to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint or stored predictions")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--pred-dir", type=Path, help="KITTI depth PNGs named <scene>/<frame>.png")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", default="val")
    e.add_argument("--out", type=Path, help="directory for metrics.csv / metrics.txt / figure")

    i = sub.add_parser("infer", help="complete one sparse depth map")
    i.add_argument("--checkpoint", required=True, type=Path)
    i.add_argument("--image", required=True, type=Path)
    i.add_argument("--sparse", required=True, type=Path)
    i.add_argument("--out", required=True, type=Path, help="output KITTI 16-bit depth PNG")
    i.add_argument("--dump-intermediates", type=Path, metavar="DIR")
    i.add_argument("--figure", type=Path, help="also render a matplotlib panel figure")

    a = sub.add_parser("ablate", help="train all four variants and tabulate validation metrics")
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--config", type=Path)
    a.add_argument("--epochs", type=int)
    a.add_argument("--seed", type=int)
    return p


def _configs(args):
    defaults = None if getattr(args, "full_scale", False) else DESK_SCALE
    net, tr = load_config(getattr(args, "config", None), defaults=defaults,
                          overrides={"epochs": getattr(args, "epochs", None),
                                     "seed": getattr(args, "seed", None)})
    if getattr(args, "variant", None):
        net = dataclasses.replace(net, variant=args.variant)
    if getattr(args, "deterministic", False):
        tr = dataclasses.replace(tr, deterministic=True)
    return net, tr


def _load(root: Path, split: str):
    try:
        samples = depth_io.load_split(root, split)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"split {split!r} under {root} has no frames")
    return samples


def cmd_synth_gen(args, manifest: RunManifest):
    out: Path = args.out
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty (use --force)")
    if args.scenes < 1:
        raise DataError("--scenes must be >= 1")
    h, w = args.size
    counts = synth.generate_dataset(out, args.scenes, h, w, args.sparse_density,
                                    args.gt_density, args.seed)
    manifest.seed = args.seed
    manifest.config = "".join(f"{k} = {v}\n" for k, v in counts.items())
    manifest.artifacts += [str(out / s) for s, n in counts.items() if n]
    manifest.phase("generate")
    manifest.write(out / "manifest.txt")
    print(f"wrote {args.scenes} scenes to {out} ({counts})")


def cmd_train(args, manifest: RunManifest):
    net_cfg, cfg = _configs(args)
    train_set = _load(args.data, "train")
    try:
        val_set = depth_io.load_split(args.data, "val") or None
    except FileNotFoundError:
        val_set = None
    manifest.phase("load")
    manifest.seed = cfg.seed
    manifest.config = dump_flat(net_cfg, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        res = trainer.train(train_set, net_cfg, cfg, val_set=val_set, out_dir=args.out,
                            resume_from=args.resume)
    finally:
        manifest.phase("train")
        manifest.write(args.out / "manifest.txt")
    viz.plot_history(res.history, args.out / "training_curves.png")
    manifest.artifacts += [str(args.out / n) for n in
                           ("train_log.csv", "last", "best", "training_curves.png")]
    manifest.write(args.out / "manifest.txt")
    print(res.log_csv(), end="")


def _predictions_from_dir(pred_dir: Path, data: Path, split: str, samples):
    preds = []
    for s in samples:
        scene, fname = s.name.split("/")
        path = pred_dir / scene / fname
        if not path.exists():
            path = pred_dir / f"{scene}_{fname}"
        if not path.exists():
            raise DataError(f"missing prediction for {s.name} in {pred_dir}")
        preds.append(depth_io.read_depth_png(path).depth)
    return preds


def cmd_eval(args, manifest: RunManifest):
    samples = _load(args.data, args.split)
    if args.checkpoint is not None:
        net = load_checkpoint(args.checkpoint)
        manifest.config = dump_flat(net.config)
        preds = trainer.predict(net, samples)
    else:
        preds = _predictions_from_dir(args.pred_dir, args.data, args.split, samples)
    reports = [losses.evaluate(p, s.gt) for p, s in zip(preds, samples)]
    mean = losses.mean_report(reports)
    manifest.phase("evaluate")
    print(mean.to_csv(), end="")
    print(mean.to_text(), end="")
    if args.out:
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(mean.to_csv())
        (out / "metrics.txt").write_text(mean.to_text())
        (out / "per_image.csv").write_text(
            losses.reports_csv({s.name: r for s, r in zip(samples, reports)}))
        _plot_per_image(reports, out / "per_image_rmse.png")
        manifest.artifacts += [str(out / n) for n in
                               ("metrics.csv", "metrics.txt", "per_image.csv", "per_image_rmse.png")]
        manifest.write(out / "manifest.txt")


def _plot_per_image(reports, path):
    plt = viz._pyplot()
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.hist([r.rmse_mm for r in reports], bins=20)
    ax.set_xlabel("per-image RMSE [mm]")
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _pad_to8(arr: np.ndarray, mode="reflect"):
    h, w = arr.shape[-2:]
    ph, pw = (-h) % 8, (-w) % 8
    if not (ph or pw):
        return arr
    width = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, width, mode=mode)


def cmd_infer(args, manifest: RunManifest):
    try:
        color = depth_io.read_color_png(args.image)
        sparse = depth_io.read_depth_png(args.sparse)
    except (FileNotFoundError, depth_io.DepthFormatError) as exc:
        raise DataError(str(exc)) from exc
    if color.shape[1:] != sparse.shape:
        raise DataError(f"image {color.shape[1:]} and sparse depth {sparse.shape} differ in size")
    net = load_checkpoint(args.checkpoint)
    manifest.config = dump_flat(net.config)
    h, w = sparse.shape
    if h % 8 or w % 8:
        manifest.notes.append(f"input {h}x{w} reflect-padded to multiple of 8 and cropped back")
    # sparse depth is zero-padded so padding never invents measurements
    c_in = _pad_to8(color)[None]
    s_in = _pad_to8(sparse.depth, mode="constant")[None, None]
    with no_grad():
        out = net(c_in.astype(np.float32), s_in.astype(np.float32))
    manifest.phase("forward")
    maps = {k: v.data[0, 0, :h, :w].astype(np.float64) for k, v in out.maps().items()}
    final = trainer.clamp_depth(maps["d_f"], net.config.d_max)
    depth_io.write_depth_png(final, args.out)
    manifest.artifacts.append(str(args.out))
    if args.dump_intermediates:
        written = viz.dump_intermediates(maps, args.dump_intermediates, net.config.d_max)
        manifest.artifacts += [str(p) for p in written]
    if args.figure:
        viz.plot_panels(maps, args.figure, net.config.d_max)
        manifest.artifacts.append(str(args.figure))
    manifest.write(args.out.with_name(args.out.name + ".manifest.txt"))
    if args.dump_intermediates:
        manifest.write(Path(args.dump_intermediates) / "manifest.txt")


def cmd_ablate(args, manifest: RunManifest):
    net_cfg, cfg = _configs(args)
    train_set = _load(args.data, "train")
    val_set = _load(args.data, "val")
    manifest.phase("load")
    manifest.seed = cfg.seed
    manifest.config = dump_flat(net_cfg, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = trainer.run_ablation(train_set, val_set, net_cfg, cfg, out_dir=args.out)
    manifest.phase("ablation")
    table = trainer.ablation_csv(rows)
    (args.out / "ablation.csv").write_text(table)
    viz.plot_ablation(rows, args.out / "ablation.png")
    manifest.artifacts += [str(args.out / "ablation.csv"), str(args.out / "ablation.png")]
    manifest.write(args.out / "manifest.txt")
    print(table, end="")
    if any(r.diverged for r in rows):
        return EXIT_DIVERGED
    return EXIT_OK


COMMANDS = {"synth-gen": cmd_synth_gen, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "ablate": cmd_ablate}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv)
    try:
        return COMMANDS[args.command](args, manifest) or EXIT_OK
    except trainer.DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, depth_io.DepthFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
