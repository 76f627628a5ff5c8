"""AdamW training loop, top-1 evaluation, component ablations and sweeps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError, EmptyInputError, NumericError
from .events import EventStream, frames_to_arrays
from .model import ModelConfig, UAMobileFormer, cross_entropy
from .nn import Module

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.1
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: Optional[float] = None
    max_steps: Optional[int] = None
    eval_train: bool = True
    # stop once every given top-1 target is reached (checked after each epoch)
    target_train_top1: Optional[float] = None
    target_val_top1: Optional[float] = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        # lr == 0 is allowed so a run can be checked for a frozen model
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and weight_decay must be >= 0 and eps > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        for target in (self.target_train_top1, self.target_val_top1):
            if target is not None and not 0 <= target <= 1:
                raise ConfigError(f"top-1 targets are fractions in [0, 1], got {target}")
        if self.target_train_top1 is not None and not self.eval_train:
            raise ConfigError("target_train_top1 needs eval_train")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**d)


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, cfg: TrainConfig,
               decay: Optional[dict] = None) -> tuple[dict, AdamWState]:
    """One AdamW update over name -> array maps; returns new arrays and state.

    Weight decay is decoupled: ``p * (1 - lr * wd)`` is applied to the
    parameter before the bias-corrected Adam step.  ``decay[name] = False``
    exempts a parameter from the decay.
    """
    b1, b2 = cfg.betas
    step = state.step + 1
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        if cfg.weight_decay and (decay is None or decay.get(name, True)):
            p = p * (1.0 - cfg.lr * cfg.weight_decay)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_params[name] = (p - cfg.lr * update).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    return new_params, AdamWState(step, new_m, new_v)


class AdamW:
    """Applies ``adamw_step`` to a module's parameters in place of their data."""

    def __init__(self, model: Module, cfg: TrainConfig):
        self.cfg = cfg
        self.named = dict(model.named_parameters())
        self.decay = {name: not p.no_decay for name, p in self.named.items()}
        self.state = AdamWState()

    def step(self) -> None:
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for name, p in self.named.items()}
        if self.cfg.grad_clip is not None:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
            if norm > self.cfg.grad_clip:
                scale = self.cfg.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        params = {name: p.data for name, p in self.named.items()}
        new, self.state = adamw_step(params, grads, self.state, self.cfg, self.decay)
        for name, p in self.named.items():
            p.data = new[name]


# -- data --------------------------------------------------------------------

@dataclass
class ArrayDataset:
    """Stacked frames (n, 2, M, H, W) with integer labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_streams(cls, streams: Sequence[EventStream], num_frames: int, hw=None) -> "ArrayDataset":
        x, y = frames_to_arrays(streams, num_frames, hw)
        if np.any(y < 0):
            raise DataError("every stream needs a label")
        return cls(x, y)


@dataclass
class StreamData:
    """Labelled train/val streams, rasterized lazily per (frames, size)."""

    train: list
    val: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    def datasets(self, num_frames: int, hw) -> tuple:
        key = (num_frames, tuple(hw))
        if key not in self._cache:
            train = ArrayDataset.from_streams(self.train, num_frames, tuple(hw))
            val = ArrayDataset.from_streams(self.val, num_frames, tuple(hw)) if self.val else None
            self._cache[key] = (train, val)
        return self._cache[key]


# -- evaluation --------------------------------------------------------------

def top1_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest index."""
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise EmptyInputError("top-1 of an empty set")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_top1(model: UAMobileFormer, dataset: ArrayDataset, batch_size: int = 64) -> float:
    if len(dataset) == 0:
        raise EmptyInputError("cannot evaluate on an empty dataset")
    return top1_from_logits(model.predict(dataset.x, batch_size), dataset.y)


# -- training ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_top1: Optional[float]
    val_top1: Optional[float]


@dataclass
class RunReport:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    wall_time: float = 0.0
    best_checkpoint: Optional[str] = None
    final_checkpoint: Optional[str] = None
    best_val_top1: Optional[float] = None
    best_epoch: Optional[int] = None
    config_hash: str = ""
    stopped_early: bool = False

    @property
    def loss_curve(self) -> list:
        return [e.train_loss for e in self.epochs]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "train_top1", "val_top1"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.train_loss),
                                 "" if e.train_top1 is None else repr(e.train_top1),
                                 "" if e.val_top1 is None else repr(e.val_top1)])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(cfg: ModelConfig, seed: int) -> UAMobileFormer:
    return UAMobileFormer(cfg, np.random.default_rng([seed, 0]))


def _batch_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def _targets_met(cfg: TrainConfig, train_top1, val_top1) -> bool:
    targets = [(cfg.target_train_top1, train_top1), (cfg.target_val_top1, val_top1)]
    active = [(t, v) for t, v in targets if t is not None]
    return bool(active) and all(v is not None and v >= t for t, v in active)


def train(model: UAMobileFormer, dataset: ArrayDataset, cfg: TrainConfig,
          val_set: Optional[ArrayDataset] = None, run_dir=None) -> RunReport:
    """Minimise cross-entropy with AdamW; deterministic given ``cfg.seed``.

    Each epoch uses a seeded permutation (last partial batch kept) and each
    step draws bridge noise from its own seeded generator.  With ``run_dir``
    the best checkpoint (by val top-1, else train loss) is written to
    ``checkpoints/best.ckpt`` and the last one to ``checkpoints/final.ckpt``.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyInputError("training set is empty")
    k = model.cfg.num_classes
    for name, ds in (("train", dataset), ("val", val_set)):
        if ds is not None and (np.any(ds.y < 0) or np.any(ds.y >= k)):
            raise DataError(f"{name} labels must lie in 0..{k - 1}")

    report = RunReport(config_hash=config_hash(model.cfg, cfg))
    opt = AdamW(model, cfg)
    ckpt_dir = Path(run_dir) / "checkpoints" if run_dir is not None else None
    dtype = model.stem.weight.dtype
    best_score = None
    step = 0
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = _batch_rng(cfg.seed, 1, epoch).permutation(n)
        model.train()
        total, seen = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = T.Tensor(dataset.x[idx], dtype=dtype)
            out = model(xb, rng=_batch_rng(cfg.seed, 2, step))
            loss = cross_entropy(out.logits, dataset.y[idx])
            model.zero_grad()
            loss.backward()
            opt.step()
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"loss became {value} at step {step}")
            report.step_losses.append(value)
            total += value * len(idx)
            seen += len(idx)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        train_top1 = evaluate_top1(model, dataset) if cfg.eval_train else None
        val_top1 = evaluate_top1(model, val_set) if val_set is not None and len(val_set) else None
        record = EpochRecord(epoch, total / seen, train_top1, val_top1)
        report.epochs.append(record)
        log.info("epoch %d loss %.4f train %s val %s", epoch, record.train_loss, train_top1, val_top1)

        score = val_top1 if val_top1 is not None else -record.train_loss
        if best_score is None or score > best_score:
            best_score = score
            report.best_epoch = epoch
            report.best_val_top1 = val_top1
            if ckpt_dir is not None:
                report.best_checkpoint = str(save_checkpoint(model, ckpt_dir / "best.ckpt"))
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        if _targets_met(cfg, train_top1, val_top1):
            report.stopped_early = True
            log.info("top-1 targets reached after epoch %d", epoch)
            break
    if ckpt_dir is not None:
        report.final_checkpoint = str(save_checkpoint(model, ckpt_dir / "final.ckpt"))
    report.wall_time = time.perf_counter() - start
    return report


# -- ablations and sweeps ------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    number: int
    mobile: bool
    former: bool
    uab: bool
    ca: bool
    dy_relu: bool
    paper_result: float

    def apply(self, cfg: ModelConfig) -> ModelConfig:
        return dataclasses.replace(cfg, enable_mobile=self.mobile, enable_former=self.former,
                                   enable_bridge=self.uab, enable_cross_attention=self.ca,
                                   enable_dy_relu=self.dy_relu)


# Component analysis on N-Caltech101; results are reference values only.
TABLE_IV_ROWS = (
    AblationRow(1, True, False, False, False, False, 76.53),
    AblationRow(2, False, True, False, False, False, 58.01),
    AblationRow(3, True, True, False, True, False, 76.83),
    AblationRow(4, True, True, False, True, True, 77.94),
    AblationRow(5, True, True, True, True, True, 79.80),
)

ABLATION_COLUMNS = ["No.", "Mobile", "Former", "UAB", "CA", "DY-ReLU", "Results",
                    "paper_result", "num_parameters", "config_hash"]


@dataclass
class AblationResult:
    row: AblationRow
    config: ModelConfig
    report: RunReport
    top1: float
    num_parameters: int


def run_ablation(data: StreamData, base: ModelConfig, cfg: TrainConfig,
                 rows: Sequence[AblationRow] = TABLE_IV_ROWS, out_csv=None, run_dir=None) -> list:
    """Train one model per component-ablation row and tabulate top-1 (percent)."""
    train_set, val_set = data.datasets(base.num_frames, base.input_hw)
    results = []
    for row in rows:
        model_cfg = row.apply(base)
        model = build_model(model_cfg, cfg.seed)
        sub = Path(run_dir) / f"ablation_row{row.number}" if run_dir is not None else None
        report = train(model, train_set, cfg, val_set, sub)
        top1 = report.best_val_top1 if report.best_val_top1 is not None else report.epochs[-1].train_top1
        results.append(AblationResult(row, model_cfg, report, float(top1 or 0.0), model.num_parameters()))
    if out_csv is not None:
        write_ablation_csv(out_csv, results)
    return results


def write_ablation_csv(path, results: Sequence[AblationResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for r in results:
            flags = [int(v) for v in (r.row.mobile, r.row.former, r.row.uab, r.row.ca, r.row.dy_relu)]
            writer.writerow([r.row.number, *flags, f"{100 * r.top1:.2f}", f"{r.row.paper_result:.2f}",
                             r.num_parameters, r.report.config_hash])


# Headline top-1 on the real benchmarks; needs the datasets and full-scale training.
BENCHMARK_RESULTS = {"ASL-DVS": 0.999, "N-Caltech101": 0.798, "DVS128-Gait-Day": 0.959}

SWEEP_FIELDS = {"tokens": "num_tokens", "token_dim": "token_dim", "frames": "num_frames", "blocks": "num_blocks"}
SWEEP_GRIDS = {
    "token_dim": (64, 128, 192, 256),
    "tokens": (1, 3, 6, 9),
    "frames": (4, 8, 12),
    "blocks": (9, 12, 14),
}
# top-1 on N-Caltech101 per grid value; token_dim values are only plotted
SWEEP_PAPER_RESULTS = {
    "tokens": {1: 74.56, 3: 76.47, 6: 79.85, 9: 73.72},
    "frames": {4: 78.16, 8: 79.85, 12: 71.01},
    "blocks": {9: 74.22, 12: 79.85, 14: 72.87},
}


def run_sweep(axis: str, data: StreamData, base: ModelConfig, cfg: TrainConfig,
              values: Optional[Sequence[int]] = None, out_csv=None, run_dir=None) -> list:
    """One training run per value of ``axis``; returns (value, top1) pairs."""
    if axis not in SWEEP_FIELDS:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_FIELDS)}")
    values = tuple(values) if values is not None else SWEEP_GRIDS[axis]
    rows = []
    for value in values:
        model_cfg = dataclasses.replace(base, **{SWEEP_FIELDS[axis]: int(value)})
        train_set, val_set = data.datasets(model_cfg.num_frames, model_cfg.input_hw)
        model = build_model(model_cfg, cfg.seed)
        sub = Path(run_dir) / f"sweep_{axis}_{value}" if run_dir is not None else None
        report = train(model, train_set, cfg, val_set, sub)
        top1 = report.best_val_top1 if report.best_val_top1 is not None else report.epochs[-1].train_top1
        rows.append((int(value), float(top1 or 0.0)))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([axis, "top1", "paper_top1"])
            for value, top1 in rows:
                ref = SWEEP_PAPER_RESULTS.get(axis, {}).get(value)
                writer.writerow([value, f"{100 * top1:.2f}", "" if ref is None else f"{ref:.2f}"])
    return rows
