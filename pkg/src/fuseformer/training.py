"""Two-stage training, the loss-bias comparison and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses
from .autodiff import Tape, Tensor, backward
from .imageio import ImagePair, atomic_write, split_dataset
from .losses import LossWeights
from .metrics import MetricReport, MetricRow, evaluate_fused
from .model import (
    ConfigError,
    ModelConfig,
    ModelWeights,
    forward_ae,
    forward_fusion,
    save_weights,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelWeights, epoch: int):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "ae"
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_schedule: str = "step"
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 50
    seed: int = 0
    checkpoint_every: int = 25
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    manifest: str | None = None
    synth_count: int = 32

    def __post_init__(self):
        if self.stage not in ("ae", "fusion"):
            raise ConfigError(f"stage must be 'ae' or 'fusion', got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "step"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'step', got {self.lr_schedule!r}")
        if len(self.loss.omega_m) != self.model.num_scales:
            raise ConfigError(
                f"omega_m has {len(self.loss.omega_m)} entries for {self.model.num_scales} scales"
            )

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)


_TOP_KEYS = {f.name for f in fields(TrainConfig)} - {"loss", "model"}
_LOSS_KEYS = {f.name for f in fields(LossWeights)}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_INT_KEYS = {"epochs", "batch_size", "lr_decay_every", "seed", "checkpoint_every", "synth_count",
             "num_scales", "heads", "layers", "height", "width"}
_LIST_KEYS = {"omega_m", "channels"}


def _parse_value(key: str, raw: str):
    if key in _LIST_KEYS:
        conv = int if key == "channels" else float
        return tuple(conv(v) for v in raw.replace(",", " ").split())
    if key in _INT_KEYS:
        return int(raw)
    if key == "head_dim":
        return None if raw.lower() in ("", "none", "auto") else int(raw)
    if key in ("stage", "lr_schedule", "manifest"):
        return raw
    return float(raw)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) over ``base``.

    Keys are the field names of :class:`TrainConfig`, :class:`LossWeights`
    and :class:`ModelConfig`; list values are comma or space separated.
    """
    base = base or TrainConfig()
    top, loss, model = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            value = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
        if key in _TOP_KEYS:
            top[key] = value
        elif key in _LOSS_KEYS:
            loss[key] = value
        elif key in _MODEL_KEYS:
            model[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        model_cfg = replace(base.model, **model)
        if "num_scales" in model and "omega_m" not in loss:
            loss["omega_m"] = (1.0,) * model_cfg.num_scales
        return replace(base, loss=replace(base.loss, **loss), model=model_cfg, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for name in sorted(_TOP_KEYS):
        value = getattr(cfg, name)
        if value is not None:
            lines.append(f"{name} = {value}")
    for obj in (cfg.loss, cfg.model):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {'auto' if value is None else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update; arrays in ``params`` are updated in place."""
    state.t += 1
    bc1 = 1.0 - BETA1 ** state.t
    bc2 = 1.0 - BETA2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


# ---------------------------------------------------------------- logs


@dataclass
class TrainLog:
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    initial_loss: float = float("nan")
    wall_times: list[float] = field(default_factory=list)
    validation: MetricRow | None = None

    def final_loss(self) -> float:
        return self.rows[-1]["loss"]

    def to_csv(self, include_timing: bool = False) -> str:
        cols = ["epoch", *self.columns, "lr", "checkpoint_loss"]
        if include_timing:
            cols.append("wall_time")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for i, row in enumerate(self.rows):
            out = [row["epoch"]]
            out += [repr(row[c]) for c in self.columns]
            out.append(repr(row["lr"]))
            ck = row.get("checkpoint_loss")
            out.append("" if ck is None else repr(ck))
            if include_timing:
                out.append(f"{self.wall_times[i]:.3f}")
            w.writerow(out)
        return buf.getvalue()


# ---------------------------------------------------------------- data helpers


def _stack(images: Sequence) -> Tensor:
    return Tensor(np.stack([np.asarray(im, dtype=np.float64) for im in images])[:, None])


def stage1_images(pairs: Sequence[ImagePair]) -> list[np.ndarray]:
    """Both bands of every pair, visible first, as reconstruction targets."""
    out = []
    for p in pairs:
        out += [p.visible.pixels, p.infrared.pixels]
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------- loss functions per stage


LossFn = Callable[[dict, ModelConfig, Sequence[int]], tuple[Tensor, dict[str, float]]]


def _ae_loss(images, w_loss: LossWeights):
    def fn(params, mcfg, idx):
        x = _stack([images[i] for i in idx])
        out = forward_ae(x, params, mcfg)
        lp = losses.l_pixel(out, x)
        ls = losses.l_ssim(out, x)
        total = lp + w_loss.alpha * ls
        return total, {"l_pixel": lp.item(), "l_ssim": ls.item()}

    return fn


def _fusion_loss(pairs, w_loss: LossWeights, kind: str):
    def fn(params, mcfg, idx):
        vis = _stack([pairs[i].visible.pixels for i in idx])
        ir = _stack([pairs[i].infrared.pixels for i in idx])
        fo = forward_fusion(vis, ir, params, mcfg)
        if kind == "fuse":
            lf = losses.l_feature(fo.fused_pyr, [p.detach() for p in fo.vis_pyr],
                                  [p.detach() for p in fo.ir_pyr], w_loss)
            lb = losses.l_ssim_bar(fo.fused, vis, ir)
            return lf + w_loss.alpha * lb, {"l_feature": lf.item(), "l_ssim_bar": lb.item()}
        lp = losses.l_pixel(fo.fused, vis)
        ls = losses.l_ssim(fo.fused, vis)
        return lp + w_loss.alpha * ls, {"l_pixel": lp.item(), "l_ssim": ls.item()}

    return fn


def dataset_loss(weights: ModelWeights, loss_fn: LossFn, n: int, batch_size: int = 16) -> float:
    """Mean per-sample loss over ``n`` samples with frozen ``weights``."""
    params = weights.tensors()
    total = 0.0
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        loss, _ = loss_fn(params, weights.config, idx)
        total += loss.item() * len(idx)
    return total / n


def _finite(weights: ModelWeights, names) -> bool:
    return all(np.all(np.isfinite(weights.params[n])) for n in names)


def _run(cfg: TrainConfig, weights: ModelWeights, trainable: tuple[str, ...], loss_fn: LossFn,
         n: int, components: tuple[str, ...], checkpoint_dir=None, tag: str = "stage"):
    if n == 0:
        raise ValueError("empty dataset")
    names = [k for k in weights.params if weights.stages[k] in trainable]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    tlog = TrainLog(columns=("loss", *components))
    tlog.initial_loss = dataset_loss(weights, loss_fn, n)
    last_good = weights.copy()
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        lr = cfg.lr_at(epoch)
        sums = dict.fromkeys(tlog.columns, 0.0)
        for idx in _batches(n, cfg.batch_size, rng):
            tape = Tape()
            params = weights.tensors(tape, trainable)
            loss, parts = loss_fn(params, weights.config, idx)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"{tag}: non-finite loss at epoch {epoch}", last_good, epoch)
            grads = backward(loss)
            adam_step(weights.params, {k: grads[params[k]] for k in names}, state, lr)
            if not _finite(weights, names):
                raise TrainingDiverged(f"{tag}: non-finite parameters at epoch {epoch}", last_good, epoch)
            sums["loss"] += value * len(idx)
            for c in components:
                sums[c] += parts[c] * len(idx)
        row = {"epoch": epoch, "lr": lr, **{c: s / n for c, s in sums.items()}}
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            row["checkpoint_loss"] = dataset_loss(weights, loss_fn, n)
            if not math.isfinite(row["checkpoint_loss"]):
                raise TrainingDiverged(f"{tag}: non-finite checkpoint loss at epoch {epoch}", last_good, epoch)
            last_good = weights.copy()
            if checkpoint_dir is not None:
                save_weights(weights, Path(checkpoint_dir) / f"{tag}_epoch{epoch:04d}.bin")
        tlog.rows.append(row)
        tlog.wall_times.append(time.perf_counter() - started)
        log.info("%s epoch %d loss %.6g", tag, epoch, row["loss"])
    return weights, tlog


def train_stage1(cfg: TrainConfig, pairs: Sequence[ImagePair], checkpoint_dir=None,
                 images: Sequence[np.ndarray] | None = None) -> tuple[ModelWeights, TrainLog]:
    """Train encoder and decoder as an autoencoder on both bands of ``pairs``."""
    if cfg.stage != "ae":
        raise ConfigError("train_stage1 needs stage = ae")
    images = list(images) if images is not None else stage1_images(pairs)
    weights = ModelWeights.init(cfg.model, cfg.seed)
    fn = _ae_loss(images, cfg.loss)
    return _run(cfg, weights, ("encoder", "decoder"), fn, len(images),
                ("l_pixel", "l_ssim"), checkpoint_dir, "ae")


def fusion_start(cfg: TrainConfig, stage1: ModelWeights) -> ModelWeights:
    """Stage-1 encoder/decoder plus freshly initialised fusion blocks."""
    if stage1 is None:
        raise ValueError("stage-1 weights are required")
    fresh = ModelWeights.init(cfg.model, cfg.seed)
    for name in fresh.names():
        if fresh.stages[name] != "fusion":
            if name not in stage1.params or stage1.params[name].shape != fresh.params[name].shape:
                raise ConfigError(f"stage-1 weights do not provide {name} for this model config")
            fresh.params[name] = stage1.params[name].copy()
    return fresh


def train_stage2(cfg: TrainConfig, pairs: Sequence[ImagePair], stage1: ModelWeights,
                 checkpoint_dir=None, loss_kind: str = "fuse") -> tuple[ModelWeights, TrainLog]:
    """Train only the fusion blocks; encoder and decoder stay frozen.

    ``loss_kind="fuse"`` uses the dual-input fusion loss; ``"single"`` uses
    the reconstruction loss against the visible band alone.
    """
    if cfg.stage != "fusion":
        raise ConfigError("train_stage2 needs stage = fusion")
    if loss_kind not in ("fuse", "single"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    weights = fusion_start(cfg, stage1)
    fn = _fusion_loss(list(pairs), cfg.loss, loss_kind)
    comps = ("l_feature", "l_ssim_bar") if loss_kind == "fuse" else ("l_pixel", "l_ssim")
    return _run(cfg, weights, ("fusion",), fn, len(pairs), comps, checkpoint_dir, f"fusion-{loss_kind}")


# ---------------------------------------------------------------- evaluation


def fuse_images(weights: ModelWeights, vis: np.ndarray, ir: np.ndarray) -> np.ndarray:
    params = weights.tensors()
    out = forward_fusion(Tensor(np.asarray(vis)[None]), Tensor(np.asarray(ir)[None]), params, weights.config)
    return out.fused.data[0]


def evaluate(weights: ModelWeights, pairs: Sequence[ImagePair]) -> MetricReport:
    report = MetricReport()
    if not pairs:
        return report
    params = weights.tensors()
    vis = _stack([p.visible.pixels for p in pairs])
    ir = _stack([p.infrared.pixels for p in pairs])
    fused = forward_fusion(vis, ir, params, weights.config).fused.data[:, 0]
    for p, f in zip(pairs, fused):
        report.rows.append(evaluate_fused(p.id, f, p.visible.pixels, p.infrared.pixels))
    return report


def _select(pairs: Sequence[ImagePair], ids: Sequence[str]) -> list[ImagePair]:
    by_id = {p.id: p for p in pairs}
    return [by_id[i] for i in ids]


# ---------------------------------------------------------------- experiments


@dataclass
class BiasReport:
    seed: int
    fuse: MetricRow
    single: MetricRow
    fuse_log: TrainLog
    single_log: TrainLog

    @property
    def mi_gap(self) -> float:
        return self.fuse.mi_ir - self.single.mi_ir

    def to_csv(self) -> str:
        cols = ("entropy", "scd", "mi", "ssim", "ssim_vis", "ssim_ir", "mi_vis", "mi_ir")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("seed", "arm", *cols))
        for arm, row in (("l_fuse", self.fuse), ("single_input", self.single)):
            w.writerow([self.seed, arm] + [f"{getattr(row, c):.6f}" for c in cols])
        return buf.getvalue()


def bias_experiment(cfg: TrainConfig, pairs: Sequence[ImagePair], stage1: ModelWeights) -> BiasReport:
    """Train the fusion blocks twice from one initialisation and compare on the test split.

    Arm A minimises the dual-input fusion loss; arm B the visible-only
    reconstruction loss. Both start from ``fusion_start(cfg, stage1)``.
    """
    split = split_dataset([p.id for p in pairs], cfg.seed)
    train, test = _select(pairs, split.train), _select(pairs, split.test)
    cfg = replace(cfg, stage="fusion")
    wa, log_a = train_stage2(cfg, train, stage1, loss_kind="fuse")
    wb, log_b = train_stage2(cfg, train, stage1, loss_kind="single")
    return BiasReport(cfg.seed, evaluate(wa, test).aggregate(), evaluate(wb, test).aggregate(), log_a, log_b)


SWEEP_AXES = ("layers", "batch", "lr")


@dataclass
class SweepTable:
    axis: str
    rows: list[tuple[float, MetricRow, str]]

    def to_csv(self) -> str:
        cols = ("entropy", "scd", "mi", "ssim", "ssim_vis", "ssim_ir", "mi_vis", "mi_ir")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("axis", "value", *cols, "flag"))
        for value, row, flag in self.rows:
            w.writerow([self.axis, _fmt_axis(value)] + [f"{getattr(row, c):.6f}" for c in cols] + [flag])
        return buf.getvalue()


def _fmt_axis(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) >= 1 else repr(float(v))


def sweep(base: TrainConfig, axis: str, values: Sequence[float], pairs: Sequence[ImagePair],
          stage1: ModelWeights) -> SweepTable:
    """One stage-2 run per value (same seed), scored on the test split.

    Rows are sorted by value. On the ``layers`` axis a row whose mean SSIM is
    lower than the previous row's is flagged ``ssim_decrease``.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    split = split_dataset([p.id for p in pairs], base.seed)
    train, test = _select(pairs, split.train), _select(pairs, split.test)
    rows = []
    prev_ssim = None
    for value in sorted(values):
        if axis == "layers":
            cfg = replace(base, stage="fusion", model=replace(base.model, layers=int(value)))
        elif axis == "batch":
            cfg = replace(base, stage="fusion", batch_size=int(value))
        else:
            cfg = replace(base, stage="fusion", learning_rate=float(value))
        weights, _ = train_stage2(cfg, train, stage1)
        agg = evaluate(weights, test).aggregate()
        flag = ""
        if axis == "layers" and prev_ssim is not None and agg.ssim < prev_ssim:
            flag = "ssim_decrease"
        prev_ssim = agg.ssim
        rows.append((value, agg, flag))
    return SweepTable(axis, rows)


def write_text(path, text: str) -> None:
    atomic_write(path, text)
