"""Central finite-difference gradient checks for the autodiff core and model.

Relative error for one tensor is ``max|analytic - numeric|`` over the checked
coordinates divided by the tensor's largest gradient magnitude (inf-norm),
which stays meaningful when individual gradient entries are near zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

ZERO_GRAD_FLOOR = 1e-3


@dataclass
class TensorCheck:
    name: str
    rel_error: float
    checked: int
    skipped: int


@dataclass
class GradCheckResult:
    name: str
    tensors: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.rel_error for t in self.tensors), default=0.0)

    @property
    def skipped(self) -> int:
        return sum(t.skipped for t in self.tensors)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], name: str = "",
                    eps: float = 1e-5, max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None,
                    input_names: Optional[Sequence[str]] = None) -> GradCheckResult:
    """Compare backward() against central differences of the scalar ``fn()``.

    ``fn`` must rebuild its graph from the current ``.data`` of ``inputs``.
    Coordinates whose +/-eps probes flip a piecewise branch (max, relu) are
    skipped: the derivative does not exist across a kink.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with T.record_branches() as base_branches:
        loss = fn()
    base_branches = list(base_branches)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate():
        with T.no_grad(), T.record_branches() as branches:
            value = float(fn().data.sum())
        return value, list(branches)

    probes = []
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num, ana, skipped = [], [], 0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus, br_plus = evaluate()
            flat[c] = orig - eps
            f_minus, br_minus = evaluate()
            flat[c] = orig
            if not (_same_branches(br_plus, base_branches) and _same_branches(br_minus, base_branches)):
                skipped += 1
                continue
            num.append((f_plus - f_minus) / (2 * eps))
            ana.append(analytic[i].reshape(-1)[c])
        probes.append((np.asarray(num), np.asarray(ana), skipped))

    # Tensors whose true gradient is identically zero (e.g. key biases under
    # softmax shift invariance) are compared against the largest gradient in
    # the check rather than against their own rounding noise.
    overall = max((np.abs(n).max() for n, _, _ in probes if n.size), default=0.0)
    floor = max(ZERO_GRAD_FLOOR * overall, 1e-12)
    result = GradCheckResult(name)
    for i, (num, ana, skipped) in enumerate(probes):
        err = 0.0
        if num.size:
            scale = max(np.abs(num).max(), np.abs(ana).max(), floor)
            err = float(np.abs(num - ana).max() / scale)
        label = input_names[i] if input_names else getattr(inputs[i], "name", "") or f"input{i}"
        result.tensors.append(TensorCheck(label, err, int(num.size), skipped))
    return result


def _op_cases(rng: np.random.Generator):
    """(name, builder) pairs; each builder returns (inputs, fn)."""

    def rand(*shape, positive=False):
        a = rng.standard_normal(shape)
        return Tensor(np.abs(a) + 0.5 if positive else a)

    def weighted(y: Tensor, seed_shape=None) -> Tensor:
        w = Tensor(np.random.default_rng(1).standard_normal(y.shape))
        return (y * w).sum()

    def case(name, make_inputs, op):
        def build():
            inputs = make_inputs()
            return inputs, (lambda: weighted(op(*inputs)))
        return name, build

    cases = [
        case("add", lambda: [rand(3, 4), rand(4)], T.add),
        case("sub", lambda: [rand(3, 4), rand(3, 1)], T.sub),
        case("mul", lambda: [rand(2, 3, 4), rand(1, 3, 4)], T.mul),
        case("div", lambda: [rand(3, 4), rand(3, 4, positive=True)], T.div),
        case("neg", lambda: [rand(5)], T.neg),
        case("pow", lambda: [rand(3, 3, positive=True)], lambda a: T.power(a, 2.5)),
        case("exp", lambda: [rand(4, 2)], T.exp),
        case("log", lambda: [rand(4, 2, positive=True)], T.log),
        case("sqrt", lambda: [rand(4, 2, positive=True)], T.sqrt),
        case("tanh", lambda: [rand(4, 2)], T.tanh),
        case("maximum", lambda: [rand(4, 5), rand(4, 5)], T.maximum),
        case("relu", lambda: [rand(4, 5)], T.relu),
        case("gelu", lambda: [rand(4, 5)], T.gelu),
        case("softplus", lambda: [rand(4, 5)], T.softplus),
        case("sum", lambda: [rand(3, 4, 5)], lambda a: T.tsum(a, axis=1, keepdims=True)),
        case("mean", lambda: [rand(3, 4, 5)], lambda a: T.mean(a, axis=(0, 2))),
        case("reshape", lambda: [rand(3, 4)], lambda a: T.reshape(a, (2, 6))),
        case("transpose", lambda: [rand(2, 3, 4)], lambda a: T.transpose(a, (2, 0, 1))),
        case("broadcast_to", lambda: [rand(3, 1)], lambda a: T.broadcast_to(a, (2, 3, 4))),
        case("getitem", lambda: [rand(4, 5)], lambda a: a[1:3, ::2]),
        case("concat", lambda: [rand(2, 3), rand(4, 3)], lambda a, b: T.concat([a, b], axis=0)),
        case("matmul", lambda: [rand(2, 3, 4), rand(4, 5)], T.matmul),
        case("linear", lambda: [rand(2, 3, 4), rand(4, 5), rand(5)], T.linear),
        case("softmax", lambda: [rand(3, 6)], lambda a: T.softmax(a, axis=-1)),
        case("log_softmax", lambda: [rand(3, 6)], lambda a: T.log_softmax(a, axis=0)),
        case("layer_norm", lambda: [rand(3, 6), rand(6), rand(6)], T.layer_norm),
        case("conv3d", lambda: [rand(2, 4, 3, 4, 4), rand(6, 2, 3, 3, 3), rand(6)],
             lambda x, w, b: T.conv3d(x, w, b, groups=2)),
        case("conv3d_depthwise_strided", lambda: [rand(1, 3, 4, 5, 5), rand(3, 1, 3, 3, 3)],
             lambda x, w: T.conv3d(x, w, stride=(1, 2, 2), groups=3)),
        case("conv3d_pointwise", lambda: [rand(2, 3, 2, 3, 3), rand(5, 3, 1, 1, 1)],
             lambda x, w: T.conv3d(x, w)),
        case("conv3d_stem", lambda: [rand(1, 2, 4, 6, 6), rand(3, 2, 3, 3, 3), rand(3)],
             lambda x, w, b: T.conv3d(x, w, b, stride=2, padding=1)),
    ]
    return cases


def run_op_checks(seed: int = 0, eps: float = 1e-5) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    with T.default_dtype(np.float64):
        for name, build in _op_cases(rng):
            inputs, fn = build()
            results.append(check_gradients(fn, inputs, name=name, eps=eps))
    return results


def tiny_model_config():
    """C=4, d=8, two tokens, two blocks over 8x8 frames."""
    from .model import ModelConfig

    return ModelConfig(num_frames=4, input_hw=(8, 8), stem_channels=4, channel_schedule=(4, 8),
                       num_blocks=2, num_tokens=2, token_dim=8, num_heads=2, num_classes=3,
                       expansion=2, head_hidden=16)


def run_model_check(seed: int = 0, eps: float = 1e-5, max_coords: int = 6,
                    config=None) -> GradCheckResult:
    """Finite-difference check of the full model loss in train mode.

    The bridge noise is redrawn from the same seed on every evaluation, so
    the loss is a deterministic function of the parameters.
    """
    from .model import UAMobileFormer, cross_entropy

    with T.default_dtype(np.float64):
        cfg = config or tiny_model_config()
        model = UAMobileFormer(cfg, np.random.default_rng(seed))
        data_rng = np.random.default_rng(seed + 1)
        # Move DY-ReLU away from its ReLU initialisation so both branches are exercised.
        for name, p in model.named_parameters():
            if name.endswith("coeff.fc2.weight"):
                p.data = data_rng.normal(0, 0.3, p.shape)
            if name.endswith("_out.weight") or name.endswith("out_proj.weight") or name.endswith("back_proj.weight"):
                p.data = data_rng.normal(0, 0.3, p.shape)
        x = Tensor(data_rng.random((2, 2, cfg.num_frames, *cfg.input_hw)))
        labels = np.array([0, 2])
        named = list(model.named_parameters())

        model.train()

        def fn():
            logits = model(x, rng=np.random.default_rng(seed + 2)).logits
            return cross_entropy(logits, labels)

        return check_gradients(fn, [p for _, p in named], name="tiny_model", eps=eps,
                               max_coords=max_coords, rng=np.random.default_rng(seed + 3),
                               input_names=[n for n, _ in named])


def run_suite(seed: int = 0, include_model: bool = True) -> list[GradCheckResult]:
    """Every differentiable op, the block sublayers, then the tiny model."""
    from .blocks import block_gradient_checks

    results = run_op_checks(seed)
    results.extend(block_gradient_checks(seed))
    if include_model:
        results.append(run_model_check(seed))
    for r in results:
        log.info("gradcheck %-28s max rel err %.3e (skipped %d)", r.name, r.max_rel_error, r.skipped)
    return results
