"""Full network: stem, stacked Mobile-Former blocks, classification head, loss."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, MobileFormerBlock
from .errors import ConfigError, DataError, DimensionError
from .nn import Conv3d, Linear, Module, ModuleList
from .tensor import Parameter, Tensor

TOGGLES = ("enable_mobile", "enable_former", "enable_cross_attention", "enable_bridge", "enable_dy_relu")


@dataclass
class ModelConfig:
    num_frames: int = 8
    input_hw: tuple = (64, 64)
    stem_channels: int = 24
    channel_schedule: tuple = (24, 48, 96, 128)
    num_blocks: int = 12
    num_tokens: int = 6
    token_dim: int = 192
    num_heads: int = 4
    num_classes: int = 4
    expansion: int = 2
    head_hidden: int = 256
    enable_mobile: bool = True
    enable_former: bool = True
    enable_cross_attention: bool = True
    enable_bridge: bool = True
    enable_dy_relu: bool = True

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.channel_schedule = tuple(int(v) for v in self.channel_schedule)
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if not self.channel_schedule or any(c < 1 for c in self.channel_schedule):
            raise ConfigError("channel_schedule needs at least one positive entry")
        if len(self.channel_schedule) > self.num_blocks:
            raise ConfigError(f"{len(self.channel_schedule)} stages need at least as many blocks, got {self.num_blocks}")
        if self.num_frames < 2 or min(self.input_hw) < 2 or len(self.input_hw) != 2:
            raise ConfigError(f"stem needs extents >= 2, got frames={self.num_frames} hw={self.input_hw}")
        if self.num_tokens < 1 or self.num_classes < 1 or self.stem_channels < 1 or self.head_hidden < 1:
            raise ConfigError("num_tokens, num_classes, stem_channels and head_hidden must be >= 1")
        # BlockConfig carries the remaining cross-field rules
        self.block_config(0)

    def stage_of(self, i: int) -> int:
        return i * len(self.channel_schedule) // self.num_blocks

    def block_config(self, i: int) -> BlockConfig:
        stage = self.stage_of(i)
        first = i == 0 or self.stage_of(i - 1) != stage
        c_out = self.channel_schedule[stage]
        c_in = self.stem_channels if i == 0 else self.channel_schedule[self.stage_of(i - 1)]
        if not self.enable_mobile:
            c_in = c_out = self.stem_channels
        flags = {k: getattr(self, k) for k in TOGGLES}
        return BlockConfig(c_in, c_out, self.token_dim, self.num_heads, self.expansion,
                           stride=2 if first and stage > 0 else 1, **flags)

    @property
    def final_channels(self) -> int:
        return self.channel_schedule[-1] if self.enable_mobile else self.stem_channels

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["channel_schedule"] = list(self.channel_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


class ForwardOutput(NamedTuple):
    logits: Tensor
    tokens: Optional[Tensor]
    features: list
    block_tokens: list


class UAMobileFormer(Module):
    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.stem = Conv3d(2, cfg.stem_channels, 3, rng, stride=2, padding=1)
        if cfg.enable_former:
            self.tokens = Parameter(rng.normal(0.0, 0.02, (cfg.num_tokens, cfg.token_dim)), no_decay=True)
            if not cfg.enable_mobile:
                # without cross-attention this is the tokens' only view of the input
                self.token_embed = Linear(cfg.stem_channels, cfg.token_dim, rng)
        self.blocks = ModuleList(MobileFormerBlock(cfg.block_config(i), rng) for i in range(cfg.num_blocks))
        head_in = (cfg.final_channels if cfg.enable_mobile else 0) + (cfg.token_dim if cfg.enable_former else 0)
        self.head_fc1 = Linear(head_in, cfg.head_hidden, rng)
        self.head_fc2 = Linear(cfg.head_hidden, cfg.num_classes, rng)
        # assign hierarchical names once
        list(self.named_parameters())

    def stem_forward(self, frames: Tensor) -> Tensor:
        if frames.ndim != 5 or frames.shape[1] != 2:
            raise DimensionError(f"expected input (batch, 2, M, H, W), got {frames.shape}")
        if min(frames.shape[2:]) < 2:
            raise ConfigError(f"stem needs every extent >= 2, got {frames.shape[2:]}")
        return self.stem(frames)

    def forward(self, frames, rng: Optional[np.random.Generator] = None) -> ForwardOutput:
        cfg = self.cfg
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.stem.weight.dtype))
        expected = (2, cfg.num_frames) + cfg.input_hw
        if x.shape[1:] != expected:
            raise DimensionError(f"input {x.shape} does not match config (batch,) + {expected}")
        x = self.stem_forward(x)
        batch = x.shape[0]
        z = None
        if cfg.enable_former:
            z = T.broadcast_to(self.tokens, (batch,) + self.tokens.shape)
            if not cfg.enable_mobile:
                z = z + self.token_embed(T.mean(x, axis=(2, 3, 4))).reshape(batch, 1, cfg.token_dim)
        features, block_tokens = [], []
        for i, block in enumerate(self.blocks):
            try:
                x, z = block(x, z, rng)
            except DimensionError as exc:
                raise DimensionError(f"block {i}: {exc}") from None
            features.append(x)
            block_tokens.append(z)
        parts = []
        if cfg.enable_mobile:
            parts.append(T.mean(x, axis=(2, 3, 4)))
        if cfg.enable_former:
            parts.append(z[:, 0, :])
        pooled = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        logits = self.head_fc2(T.gelu(self.head_fc1(pooled)))
        return ForwardOutput(logits, z, features, block_tokens)

    def predict(self, frames, batch_size: int = 64) -> np.ndarray:
        """Eval-mode logits as a numpy array, computed without a graph."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                chunks = [self(frames[i:i + batch_size]).logits.data for i in range(0, len(frames), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(chunks, axis=0)


def stem(model: UAMobileFormer, frames) -> Tensor:
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    return model.stem_forward(x)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"logits {logits.shape} vs {labels.size} labels")
    k = logits.shape[1]
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} at index {bad[0]} outside 0..{k - 1}")
    logp = T.log_softmax(logits, axis=1)
    picked = logp[np.arange(labels.size), labels]
    return -T.mean(picked)


def parameter_inventory(model: Module) -> dict:
    return {name: tuple(p.shape) for name, p in model.named_parameters()}
