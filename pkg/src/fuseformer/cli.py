"""Command-line entry point.

Exit codes: 0 ok, 1 check or training failure, 2 I/O error, 3 shape or
configuration error, 4 partial evaluation (some fused images missing).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .imageio import (
    ManifestError,
    PGMError,
    load_manifest,
    load_pgm,
    read_manifest,
    save_pgm,
    synth_pairs,
    write_manifest,
)
from .metrics import MetricReport, evaluate_fused
from .model import ConfigError, WeightFileError, load_weights, save_weights
from .selftest import CHECKS, run_selftest
from .training import (
    TrainConfig,
    TrainingDiverged,
    bias_experiment,
    fuse_images,
    load_config,
    sweep,
    train_stage1,
    train_stage2,
    write_text,
)

EXIT_OK, EXIT_FAIL, EXIT_IO, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2, 3, 4

log = logging.getLogger("fuseformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as configuration errors (exit 3)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- shared helpers


def _add_data_flags(p):
    g = p.add_argument_group("data (a manifest, or generated synthetic pairs)")
    g.add_argument("--manifest", help="pair manifest: 'id vis.pgm ir.pgm' per line")
    g.add_argument("--synth", type=int, metavar="N", help="use N synthetic pairs instead of a manifest")
    g.add_argument("--synth-size", type=int, default=None, metavar="PX",
                   help="side of synthetic images (default: model input size)")
    g.add_argument("--synth-seed", type=int, default=0, help="seed for synthetic pairs (default 0)")


def _add_train_flags(p):
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--epochs", type=int, help="override epochs")
    p.add_argument("--batch-size", type=int, help="override batch size")
    p.add_argument("--lr", type=float, help="override learning rate")
    p.add_argument("--seed", type=int, help="override the training seed")
    _add_data_flags(p)


def _train_config(args, stage: str) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    over = {"stage": stage}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            over[key] = value
    try:
        return replace(cfg, **over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _adopt_model(cfg: TrainConfig, stage1) -> TrainConfig:
    """Use the stage-1 model config; reset per-scale loss weights if the depth changes."""
    model = stage1.config
    loss = cfg.loss
    if len(loss.omega_m) != model.num_scales:
        loss = replace(loss, omega_m=(1.0,) * model.num_scales)
    return replace(cfg, model=model, loss=loss)


def _pairs(args, cfg: TrainConfig):
    if args.manifest and args.synth is not None:
        raise UsageError("give either --manifest or --synth, not both")
    if args.synth is not None:
        size = args.synth_size or cfg.model.height
        return synth_pairs(args.synth, size, args.synth_seed)
    manifest = args.manifest or cfg.manifest
    if manifest:
        return load_manifest(manifest)
    return synth_pairs(cfg.synth_count, cfg.model.height, args.synth_seed)


def _check_pair_size(pairs, cfg):
    want = (cfg.model.height, cfg.model.width)
    for p in pairs:
        if p.visible.pixels.shape != want:
            raise ad.DimensionError(f"pair {p.id} is {p.visible.pixels.shape}, model expects {want}")


def _write_log(path, tlog, timing: bool):
    if path:
        write_text(path, tlog.to_csv(include_timing=timing))


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    pairs = synth_pairs(args.count, args.size, args.seed)
    write_manifest(args.out, pairs, image_dir=args.image_dir)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def _save_last_good(exc: TrainingDiverged, out) -> None:
    path = f"{out}.last_good.bin"
    save_weights(exc.last_good, path)
    print(f"training diverged: {exc}; last good weights saved to {path}", file=sys.stderr)


def cmd_train_ae(args) -> int:
    cfg = _train_config(args, "ae")
    pairs = _pairs(args, cfg)
    _check_pair_size(pairs, cfg)
    if args.checkpoint_dir:
        Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    try:
        weights, tlog = train_stage1(cfg, pairs, checkpoint_dir=args.checkpoint_dir)
    except TrainingDiverged as exc:
        _save_last_good(exc, args.out)
        return EXIT_FAIL
    save_weights(weights, args.out)
    _write_log(args.log, tlog, args.log_timing)
    print(f"stage 1: loss {tlog.rows[0]['loss']:.6g} -> {tlog.final_loss():.6g}; weights {args.out}")
    return EXIT_OK


def cmd_train_fusion(args) -> int:
    cfg = _train_config(args, "fusion")
    stage1 = load_weights(args.stage1)
    cfg = _adopt_model(cfg, stage1)
    pairs = _pairs(args, cfg)
    _check_pair_size(pairs, cfg)
    if args.checkpoint_dir:
        Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    try:
        weights, tlog = train_stage2(cfg, pairs, stage1, checkpoint_dir=args.checkpoint_dir,
                                     loss_kind=args.loss)
    except TrainingDiverged as exc:
        _save_last_good(exc, args.out)
        return EXIT_FAIL
    save_weights(weights, args.out)
    _write_log(args.log, tlog, args.log_timing)
    print(f"stage 2 ({args.loss}): loss {tlog.initial_loss:.6g} -> {tlog.final_loss():.6g}; weights {args.out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    weights = load_weights(args.weights)
    vis, ir = load_pgm(args.vis), load_pgm(args.ir)
    cfg = weights.config
    for name, img in (("visible", vis), ("infrared", ir)):
        if (img.height, img.width) != (cfg.height, cfg.width):
            raise ad.DimensionError(
                f"{name} image is {img.width}x{img.height}, weights expect {cfg.width}x{cfg.height}")
    save_pgm(np.clip(fuse_images(weights, vis.pixels, ir.pixels), 0.0, 1.0), args.out)
    # score the 8-bit image as written so the sidecar agrees with `eval`
    fused = load_pgm(args.out).pixels
    pid = Path(args.out).stem
    report = MetricReport([evaluate_fused(pid, fused, vis.pixels, ir.pixels)])
    write_text(f"{args.out}.metrics.csv", report.to_csv())
    if args.diff_dir:
        d = Path(args.diff_dir)
        save_pgm(np.abs(fused - vis.pixels), d / f"{pid}_diff_vis.pgm")
        save_pgm(np.abs(fused - ir.pixels), d / f"{pid}_diff_ir.pgm")
    print(f"fused image {args.out}")
    return EXIT_OK


def _threads() -> int:
    raw = os.environ.get("FUSEFORMER_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError as exc:
        raise ConfigError(f"FUSEFORMER_THREADS must be an integer, got {raw!r}") from exc


def cmd_eval(args) -> int:
    entries = read_manifest(args.manifest)
    fused_dir = Path(args.fused_dir)
    present, missing = [], []
    for pid, vis, ir in entries:
        path = fused_dir / f"{pid}.pgm"
        (present if path.exists() else missing).append((pid, vis, ir, path))

    def score(item):
        pid, vis, ir, path = item
        return evaluate_fused(pid, load_pgm(path), load_pgm(vis), load_pgm(ir))

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(score, present))
    write_text(args.out, MetricReport(rows).to_csv())
    if missing:
        for pid, *_ , path in missing:
            print(f"missing fused image for {pid}: {path}", file=sys.stderr)
        return EXIT_PARTIAL
    if not rows:
        print("manifest lists no pairs", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"evaluated {len(rows)} pairs; report {args.out}")
    return EXIT_OK


def cmd_bias_exp(args) -> int:
    cfg = _train_config(args, "fusion")
    stage1 = load_weights(args.stage1)
    cfg = _adopt_model(cfg, stage1)
    pairs = _pairs(args, cfg)
    _check_pair_size(pairs, cfg)
    lines, wins = [], 0
    for seed in args.seeds:
        rep = bias_experiment(replace(cfg, seed=seed), pairs, stage1)
        body = rep.to_csv().splitlines()
        if not lines:
            lines.append(body[0])
        lines += body[1:]
        wins += rep.mi_gap > 0
        print(f"seed {seed}: MI(fused, ir) l_fuse {rep.fuse.mi_ir:.4f} vs single-input {rep.single.mi_ir:.4f}")
    write_text(args.out, "\n".join(lines) + "\n")
    print(f"l_fuse ahead on MI(fused, ir) in {wins} of {len(args.seeds)} seeds; report {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _train_config(args, "fusion")
    stage1 = load_weights(args.stage1)
    cfg = _adopt_model(cfg, stage1)
    pairs = _pairs(args, cfg)
    _check_pair_size(pairs, cfg)
    table = sweep(cfg, args.axis, args.values, pairs, stage1)
    write_text(args.out, table.to_csv())
    print(f"{len(table.rows)} sweep rows; table {args.out}")
    return EXIT_OK


GRADIENT_CHECKS = ("conv2d", "matmul", "softmax", "elementwise ops", "loss gradients", "model gradient")


def cmd_gradcheck(args) -> int:
    failed = None
    for name, fn in CHECKS:
        if name not in GRADIENT_CHECKS:
            continue
        detail = fn()
        print(f"{'ok' if not detail else 'FAIL':4s} {name}{': ' + detail if detail else ''}")
        if detail and failed is None:
            failed = name
    if failed:
        print(f"gradient check failed: {failed}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest(print)
    bad = [r for r in results if not r.ok]
    if bad:
        print(f"selftest failed: {bad[0].name}: {bad[0].detail}", file=sys.stderr)
        return EXIT_FAIL
    print(f"selftest passed ({len(results)} checks)")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fuseformer", description="Infrared/visible image fusion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic visible/infrared pairs and a manifest")
    p.add_argument("--count", type=int, default=32, help="number of pairs (default 32)")
    p.add_argument("--size", type=int, default=32, help="image side in pixels (default 32)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--image-dir", default="images", help="image folder next to the manifest")
    p.add_argument("--out", required=True, help="manifest path to write")
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train-ae", cmd_train_ae, "stage 1: train encoder and decoder"),
                                 ("train-fusion", cmd_train_fusion, "stage 2: train fusion blocks")):
        p = sub.add_parser(name, help=helptext)
        _add_train_flags(p)
        if name == "train-fusion":
            p.add_argument("--stage1", required=True, help="stage-1 weight file")
            p.add_argument("--loss", choices=("fuse", "single"), default="fuse",
                           help="fusion loss (default) or visible-only reconstruction loss")
        p.add_argument("--out", required=True, help="weight file to write")
        p.add_argument("--log", help="per-epoch CSV log")
        p.add_argument("--log-timing", action="store_true",
                       help="add a wall_time column to the log (not reproducible)")
        p.add_argument("--checkpoint-dir", help="save weights every checkpoint_every epochs")
        p.set_defaults(func=func)

    p = sub.add_parser("fuse", help="fuse one registered pair")
    p.add_argument("--weights", required=True, help="stage-2 weight file")
    p.add_argument("--vis", required=True, help="visible-band PGM")
    p.add_argument("--ir", required=True, help="infrared-band PGM")
    p.add_argument("--out", required=True, help="fused PGM; metrics go to <out>.metrics.csv")
    p.add_argument("--diff-dir", help="also write |fused-vis| and |fused-ir| PGMs here")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score fused images listed by a manifest")
    p.add_argument("--manifest", required=True, help="pair manifest")
    p.add_argument("--fused-dir", required=True, help="folder holding <id>.pgm fused images")
    p.add_argument("--out", required=True, help="CSV report to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bias-exp", help="fusion loss vs visible-only loss, per seed")
    _add_train_flags(p)
    p.add_argument("--stage1", required=True, help="stage-1 weight file")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="seeds (default 0 1 2)")
    p.add_argument("--out", required=True, help="CSV report to write")
    p.set_defaults(func=cmd_bias_exp)

    p = sub.add_parser("sweep", help="one stage-2 run per hyperparameter value")
    _add_train_flags(p)
    p.add_argument("--stage1", required=True, help="stage-1 weight file")
    p.add_argument("--axis", required=True, choices=("layers", "batch", "lr"), help="hyperparameter")
    p.add_argument("--values", required=True, type=float, nargs="+", help="values to try")
    p.add_argument("--out", required=True, help="CSV table to write")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks of ops, losses and model")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="gradient checks plus loop-oracle comparisons")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PGMError, ManifestError, WeightFileError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, ad.DimensionError, ad.GeometryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
