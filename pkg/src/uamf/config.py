"""Harness configuration: one JSON document with data/model/train/output sections."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError, DataError
from .events import SynthConfig, read_manifest, synth_dataset
from .model import ModelConfig
from .training import StreamData, TrainConfig

SECTIONS = ("data", "model", "train", "output")


@dataclass
class DataConfig:
    """Where streams come from.

    ``source="synth"`` generates ``train_per_class`` / ``val_per_class``
    streams per class from ``seed`` and ``seed + 1``.  ``source="files"`` reads
    ``train_manifest`` and optionally ``val_manifest`` (CSV ``path,label``).
    """

    source: str = "synth"
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    train_per_class: int = 50
    val_per_class: int = 20
    seed: int = 0
    synth: dict = field(default_factory=lambda: dataclasses.asdict(SynthConfig()))

    def __post_init__(self):
        if self.source not in ("synth", "files"):
            raise ConfigError(f"data.source must be 'synth' or 'files', got {self.source!r}")
        if self.source == "files" and not self.train_manifest:
            raise ConfigError("data.source 'files' needs data.train_manifest")
        if self.train_per_class < 1 or self.val_per_class < 0:
            raise ConfigError("train_per_class must be >= 1 and val_per_class >= 0")
        base = dataclasses.asdict(SynthConfig())
        unknown = sorted(set(self.synth) - set(base))
        if unknown:
            raise ConfigError(f"unknown data.synth keys: {unknown}")
        resolved = SynthConfig(**{**base, **self.synth})
        self.synth = dataclasses.asdict(resolved)
        self.synth["bar_width"] = list(resolved.bar_width)
        self.synth["bar_length"] = list(resolved.bar_length)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.synth)

    def load(self, base_dir: Optional[Path] = None) -> StreamData:
        if self.source == "synth":
            cfg = self.synth_config()
            val = synth_dataset(self.val_per_class, self.seed + 1, cfg) if self.val_per_class else []
            return StreamData(synth_dataset(self.train_per_class, self.seed, cfg), val)

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() or base_dir is None else base_dir / p

        train = read_manifest(resolve(self.train_manifest))
        val = read_manifest(resolve(self.val_manifest)) if self.val_manifest else []
        return StreamData(train, val)


@dataclass
class OutputConfig:
    run_dir: str = "runs/default"


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {unknown}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


@dataclass
class HarnessConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "HarnessConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        return cls(
            data=_section(DataConfig, raw.get("data"), "data"),
            model=ModelConfig.from_dict(raw.get("model") or {}),
            train=TrainConfig.from_dict(raw.get("train") or {}),
            output=_section(OutputConfig, raw.get("output"), "output"),
        )

    def to_dict(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "output": dataclasses.asdict(self.output),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "HarnessConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=int(seed)))


def load_config(path) -> HarnessConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return HarnessConfig.from_dict(raw)


def save_resolved(cfg: HarnessConfig, run_dir) -> Path:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(cfg.to_json())
    return path


def desk_config(run_dir: str = "runs/desk") -> HarnessConfig:
    """4 blocks over 64x64, 8 frames: trains on one CPU core in a few minutes."""
    model = ModelConfig(num_frames=8, input_hw=(64, 64), stem_channels=8, channel_schedule=(8, 16, 24, 32),
                        num_blocks=4, num_tokens=6, token_dim=32, num_heads=4, num_classes=4, head_hidden=64)
    train = TrainConfig(lr=1e-3, weight_decay=0.1, epochs=30, batch_size=16, seed=0,
                        target_train_top1=0.95, target_val_top1=0.80)
    data = DataConfig(source="synth", train_per_class=50, val_per_class=20, seed=11)
    return HarnessConfig(data=data, model=model, train=train, output=OutputConfig(run_dir))
