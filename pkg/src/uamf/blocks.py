"""Uncertainty-aware Mobile-Former block and its sublayers.

Layouts used throughout:
  CNN features   (B, C, T, H, W), flattened to (B, P, C) with P = T*H*W
  global tokens  (B, N, d)

Mode (train/eval) comes from ``Module.training``.  In train mode the bridge
draws its noise from the generator passed to ``forward``; in eval mode the
bridge message is its mean and no randomness is consumed.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError, UsageError
from .nn import MLP, Conv3d, LayerNorm, Linear, Module
from .tensor import Tensor

SIGMA_FLOOR = 1e-6
# softplus(-2.25) ~= 0.1: the bridge starts with modest noise
SIGMA_INIT_BIAS = -2.25

_attention_hooks: list[Callable[[np.ndarray], None]] = []


@contextlib.contextmanager
def attention_hook(fn: Callable[[np.ndarray], None]):
    """Call ``fn(weights)`` with every attention weight array computed inside."""
    _attention_hooks.append(fn)
    try:
        yield
    finally:
        _attention_hooks.remove(fn)


@dataclass
class GaussianMessage:
    mu: Tensor
    sigma: Tensor
    sample: Tensor


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    token_dim: int
    num_heads: int = 4
    expansion: int = 2
    stride: int = 1
    enable_mobile: bool = True
    enable_former: bool = True
    enable_cross_attention: bool = True
    enable_bridge: bool = True
    enable_dy_relu: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.token_dim < 1 or self.num_heads < 1 or self.token_dim % self.num_heads:
            raise ConfigError(f"token_dim {self.token_dim} not divisible by num_heads {self.num_heads}")
        if self.expansion < 1 or self.stride not in (1, 2):
            raise ConfigError("expansion must be >= 1 and stride 1 or 2")
        if not (self.enable_mobile or self.enable_former):
            raise ConfigError("at least one of the Mobile and Former branches must be enabled")
        if self.enable_cross_attention and not (self.enable_mobile and self.enable_former):
            raise ConfigError("cross-attention needs both branches")
        if self.enable_bridge and not self.enable_cross_attention:
            raise ConfigError("the uncertainty bridge feeds cross-attention; enable it too")
        if self.enable_dy_relu and not (self.enable_former and self.enable_mobile):
            raise ConfigError("dynamic ReLU is conditioned on tokens; needs both branches")


def flatten_positions(x: Tensor) -> Tensor:
    """(B, C, T, H, W) -> (B, P, C)."""
    b, c = x.shape[:2]
    return T.swapaxes(x.reshape(b, c, -1), 1, 2)


def unflatten_positions(x: Tensor, spatial: tuple) -> Tensor:
    """(B, P, C) -> (B, C, T, H, W)."""
    b, _, c = x.shape
    return T.swapaxes(x, 1, 2).reshape((b, c) + tuple(spatial))


def reparameterize(mu: Tensor, sigma: Tensor, rng: Optional[np.random.Generator],
                   train: bool, noise: Optional[np.ndarray] = None) -> Tensor:
    """mu + eps * sigma in train mode (eps ~ N(0, I), untracked); mu in eval mode."""
    if not train:
        return mu
    if noise is None:
        if rng is None:
            raise UsageError("train-mode sampling needs a random generator")
        eps = T.gaussian_sample(mu.shape, rng, dtype=mu.dtype)
    else:
        eps = Tensor(np.broadcast_to(noise, mu.shape), dtype=mu.dtype)
    return mu + eps * sigma


class UABridge(Module):
    """Position-wise Gaussian message: mean and scale MLPs plus reparameterized sampling."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.mean_mlp = MLP(dim, dim, dim, rng)
        self.scale_mlp = MLP(dim, dim, dim, rng, out_bias=np.full(dim, SIGMA_INIT_BIAS))

    def forward(self, features: Tensor, rng: Optional[np.random.Generator] = None,
                noise: Optional[np.ndarray] = None) -> GaussianMessage:
        mu = self.mean_mlp(features)
        sigma = T.softplus(self.scale_mlp(features)) + SIGMA_FLOOR
        for name, t in (("mean_mlp", mu), ("scale_mlp", sigma)):
            if not np.all(np.isfinite(t.data)):
                path = getattr(getattr(self, name).fc2.weight, "name", "") or name
                raise NumericError(f"non-finite bridge output from {path}")
        return GaussianMessage(mu, sigma, reparameterize(mu, sigma, rng, self.training, noise))


def ua_bridge(bridge: UABridge, features: Tensor, rng=None, train: Optional[bool] = None,
              noise=None) -> GaussianMessage:
    if train is not None:
        bridge.train(train)
    return bridge(features, rng, noise)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention split over ``heads``; (..., A, d) x (..., B, d)."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(f"attention dims differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if d % heads:
        raise DimensionError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return T.swapaxes(t.reshape(t.shape[:-1] + (heads, dh)), -2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    for hook in _attention_hooks:
        hook(weights.data)
    out = T.matmul(weights, vh)
    out = T.swapaxes(out, -2, -3)
    return out.reshape(out.shape[:-2] + (d,))


class CrossAttention(Module):
    """Receiver supplies queries, sender supplies keys and values."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_init_out: bool = False):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng, zero_init=zero_init_out)

    def forward(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        if q_src.shape[-1] != self.dim or kv_src.shape[-1] != self.dim:
            raise DimensionError(f"cross-attention expects dim {self.dim}, got {q_src.shape} and {kv_src.shape}")
        out = attend(self.q_proj(q_src), self.k_proj(kv_src), self.v_proj(kv_src), self.heads)
        return self.out_proj(out)


def cross_attention(attn: CrossAttention, q_src: Tensor, kv_src: Tensor) -> Tensor:
    return attn(q_src, kv_src)


class MobileToFormer(Module):
    """Local features -> tokens: z' = z + CA(q=z, kv=proj(bridge(features)))."""

    def __init__(self, channels: int, token_dim: int, heads: int, rng: np.random.Generator,
                 use_bridge: bool = True):
        super().__init__()
        self.bridge = UABridge(channels, rng) if use_bridge else None
        self.proj = Linear(channels, token_dim, rng)
        self.attn = CrossAttention(token_dim, heads, rng)

    def forward(self, f_emb: Tensor, z: Tensor, rng=None, noise=None) -> Tensor:
        msg = self.bridge(f_emb, rng, noise).sample if self.bridge is not None else f_emb
        return z + self.attn(z, self.proj(msg))


class FormerSublayer(Module):
    """Pre-norm transformer layer over the global tokens."""

    def __init__(self, token_dim: int, heads: int, expansion: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(token_dim)
        self.mhsa = CrossAttention(token_dim, heads, rng)
        self.norm2 = LayerNorm(token_dim)
        self.ffn = MLP(token_dim, expansion * token_dim, token_dim, rng)

    def forward(self, z: Tensor) -> Tensor:
        h = self.norm1(z)
        z = z + self.mhsa(h, h)
        return z + self.ffn(self.norm2(z))


class DyReLU(Module):
    """max(a1*x + b1, a2*x + b2) with per-channel coefficients predicted from the token mean.

    The coefficient MLP starts with a zero output layer and bias (1, 0, 0, 0),
    so the layer is exactly ReLU at initialisation.
    """

    def __init__(self, channels: int, token_dim: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        init = np.zeros((4, channels))
        init[0] = 1.0
        self.coeff = MLP(token_dim, token_dim, 4 * channels, rng, zero_init_out=True, out_bias=init.ravel())

    def coefficients(self, z: Tensor) -> Tensor:
        """(B, 4, C): rows a1, b1, a2, b2."""
        ctx = T.mean(z, axis=-2)
        return self.coeff(ctx).reshape(z.shape[0], 4, self.channels)

    def forward(self, x: Tensor, z: Tensor) -> Tensor:
        return dy_relu_apply(x, self.coefficients(z))


def dy_relu_apply(x: Tensor, coeffs: Tensor) -> Tensor:
    """Apply (B, 4, C) coefficients to (B, C, ...) features."""
    shape = (coeffs.shape[0], coeffs.shape[2]) + (1,) * (x.ndim - 2)
    a1, b1, a2, b2 = (coeffs[:, i].reshape(shape) for i in range(4))
    return T.maximum(a1 * x + b1, a2 * x + b2)


class MobileSublayer(Module):
    """pw -> act -> dw3 -> dw3 -> act -> pw -> pw, residual when shapes allow."""

    def __init__(self, in_channels: int, out_channels: int, expansion: int, token_dim: int,
                 rng: np.random.Generator, stride: int = 1, dynamic: bool = True):
        super().__init__()
        hidden = expansion * in_channels
        self.stride = stride
        self.residual = in_channels == out_channels and stride == 1
        self.pw1 = Conv3d(in_channels, hidden, 1, rng)
        self.act1 = DyReLU(hidden, token_dim, rng) if dynamic else None
        self.dw1 = Conv3d(hidden, hidden, 3, rng, stride=(1, stride, stride), groups=hidden)
        self.dw2 = Conv3d(hidden, hidden, 3, rng, groups=hidden)
        self.act2 = DyReLU(hidden, token_dim, rng) if dynamic else None
        self.pw2 = Conv3d(hidden, out_channels, 1, rng)
        self.pw3 = Conv3d(out_channels, out_channels, 1, rng)

    def _act(self, act: Optional[DyReLU], x: Tensor, z: Optional[Tensor]) -> Tensor:
        return T.relu(x) if act is None else act(x, z)

    def forward(self, x: Tensor, z: Optional[Tensor] = None) -> Tensor:
        h = self._act(self.act1, self.pw1(x), z)
        h = self.dw2(self.dw1(h))
        h = self._act(self.act2, h, z)
        h = self.pw3(self.pw2(h))
        return x + h if self.residual else h


class FormerToMobile(Module):
    """Tokens -> local features: x' = x + back(CA(q=proj(x), kv=bridge(z)))."""

    def __init__(self, channels: int, token_dim: int, heads: int, rng: np.random.Generator,
                 use_bridge: bool = True):
        super().__init__()
        self.bridge = UABridge(token_dim, rng) if use_bridge else None
        self.q_in = Linear(channels, token_dim, rng)
        self.attn = CrossAttention(token_dim, heads, rng)
        self.back_proj = Linear(token_dim, channels, rng)

    def forward(self, x_local: Tensor, z: Tensor, rng=None, noise=None) -> Tensor:
        msg = self.bridge(z, rng, noise).sample if self.bridge is not None else z
        return x_local + self.back_proj(self.attn(self.q_in(x_local), msg))


class MobileFormerBlock(Module):
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c_in, c_out, d, h = cfg.in_channels, cfg.out_channels, cfg.token_dim, cfg.num_heads
        use_ca = cfg.enable_cross_attention
        self.mobile_to_former = MobileToFormer(c_in, d, h, rng, cfg.enable_bridge) if use_ca else None
        self.former = FormerSublayer(d, h, cfg.expansion, rng) if cfg.enable_former else None
        self.mobile = (MobileSublayer(c_in, c_out, cfg.expansion, d, rng, cfg.stride, cfg.enable_dy_relu)
                       if cfg.enable_mobile else None)
        self.former_to_mobile = FormerToMobile(c_out, d, h, rng, cfg.enable_bridge) if use_ca else None

    def forward(self, x: Tensor, z: Optional[Tensor], rng=None) -> tuple:
        if self.mobile_to_former is not None:
            z = self.mobile_to_former(flatten_positions(x), z, rng)
        if self.former is not None:
            z = self.former(z)
        if self.mobile is not None:
            x = self.mobile(x, z)
        if self.former_to_mobile is not None:
            spatial = x.shape[2:]
            x = unflatten_positions(self.former_to_mobile(flatten_positions(x), z, rng), spatial)
        return x, z


def block_forward(block: MobileFormerBlock, x: Tensor, z: Optional[Tensor], rng=None) -> tuple:
    return block(x, z, rng)


def block_gradient_checks(seed: int = 0) -> list:
    """Finite-difference checks of every sublayer at 64-bit (inputs and parameters)."""
    from .gradcheck import check_gradients

    results = []
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(seed)
        w_rng = np.random.default_rng(seed + 100)

        def run(name, module, inputs, call, train=True):
            module.train(train)
            named = list(module.named_parameters())
            weights = Tensor(w_rng.standard_normal(call().shape))

            def fn():
                return (call() * weights).sum()

            tensors = list(inputs) + [p for _, p in named]
            labels = [f"input{i}" for i in range(len(inputs))] + [n for n, _ in named]
            results.append(check_gradients(fn, tensors, name=name, max_coords=12,
                                           rng=np.random.default_rng(seed), input_names=labels))

        def noisy():
            return np.random.default_rng(seed + 7)

        feats = Tensor(rng.standard_normal((2, 5, 4)))
        bridge = UABridge(4, rng)
        run("ua_bridge", bridge, [feats], lambda: bridge(feats, noisy()).sample)

        q, kv = Tensor(rng.standard_normal((2, 3, 8))), Tensor(rng.standard_normal((2, 4, 8)))
        ca = CrossAttention(8, 2, rng)
        run("cross_attention", ca, [q, kv], lambda: ca(q, kv))

        f, z = Tensor(rng.standard_normal((1, 4, 4))), Tensor(rng.standard_normal((1, 2, 8)))
        m2f = MobileToFormer(4, 8, 2, rng)
        run("mobile_to_former", m2f, [f, z], lambda: m2f(f, z, noisy()))

        former = FormerSublayer(8, 2, 2, rng)
        run("former_sublayer", former, [z], lambda: former(z))

        x = Tensor(rng.standard_normal((1, 4, 2, 4, 4)))
        dy = DyReLU(4, 8, rng)
        dy.coeff.fc2.weight.data = rng.normal(0, 0.5, dy.coeff.fc2.weight.shape)
        run("dy_relu", dy, [x, z], lambda: dy(x, z))

        mobile = MobileSublayer(4, 4, 2, 8, rng)
        for act in (mobile.act1, mobile.act2):
            act.coeff.fc2.weight.data = rng.normal(0, 0.5, act.coeff.fc2.weight.shape)
        run("mobile_sublayer", mobile, [x, z], lambda: mobile(x, z))

        xl = Tensor(rng.standard_normal((1, 6, 4)))
        f2m = FormerToMobile(4, 8, 2, rng)
        run("former_to_mobile", f2m, [xl, z], lambda: f2m(xl, z, noisy()))

        block = MobileFormerBlock(BlockConfig(4, 4, 8, num_heads=2), rng)
        for act in (block.mobile.act1, block.mobile.act2):
            act.coeff.fc2.weight.data = rng.normal(0, 0.5, act.coeff.fc2.weight.shape)

        def both():
            x2, z2 = block(x, z, noisy())
            return T.concat([x2.reshape(-1), z2.reshape(-1)])

        run("block_forward", block, [x, z], both)
    return results
