"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.  The desk-scale
learning run (criterion 6) takes several minutes on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from uamf import tensor as T
from uamf.blocks import attend, attention_hook, reparameterize
from uamf.checkpoint import decode, encode, model_from_checkpoint, to_checkpoint
from uamf.config import desk_config
from uamf.events import synth_dataset
from uamf.gradcheck import run_suite, tiny_model_config
from uamf.model import ModelConfig, UAMobileFormer, cross_entropy, parameter_inventory, stem
from uamf.tensor import Tensor
from uamf.training import (ABLATION_COLUMNS, BENCHMARK_RESULTS, SWEEP_GRIDS, SWEEP_PAPER_RESULTS, TABLE_IV_ROWS,
                           StreamData, TrainConfig, build_model, evaluate_top1, run_ablation, run_sweep, train)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_1_gradient_correctness(report):
    start = time.perf_counter()
    results = run_suite(seed=0, include_model=True)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    model = results[-1]
    assert model.name == "tiny_model"
    cfg = tiny_model_config()
    assert (cfg.stem_channels, cfg.token_dim, cfg.num_tokens, cfg.num_blocks, cfg.input_hw) == (4, 8, 2, 2, (8, 8))
    ok = worst.max_rel_error < 1e-4 and elapsed < 120
    report(1, ok, f"{len(results)} checks, max rel err {worst.max_rel_error:.2e} ({worst.name}) < 1e-4, "
                  f"tiny model {model.max_rel_error:.2e}, {elapsed:.1f}s < 120s")


def test_2_reparameterization_statistics(report):
    with T.default_dtype(np.float64):
        mu, sigma = Tensor(np.full(100_000, 2.0)), Tensor(np.full(100_000, 3.0))
        draws = reparameterize(mu, sigma, np.random.default_rng(0), train=True).data
        eval_out = reparameterize(mu, sigma, np.random.default_rng(0), train=False).data
    mean_err = abs(draws.mean() - 2.0) / 2.0
    std_err = abs(draws.std() - 3.0) / 3.0
    exact = np.array_equal(eval_out, mu.data)
    report(2, mean_err < 0.01 and std_err < 0.02 and exact,
           f"mean rel err {mean_err:.2e} < 1e-2, std rel err {std_err:.2e} < 2e-2, eval returns mu: {exact}")


def test_3_attention_normalization(report):
    rng = np.random.default_rng(0)
    worst, calls = 0.0, 0

    def check(w):
        nonlocal worst, calls
        calls += 1
        worst = max(worst, float(np.abs(w.sum(axis=-1) - 1.0).max()))

    with attention_hook(check):
        for _ in range(1000):
            heads = int(rng.integers(1, 5))
            d = heads * int(rng.integers(1, 5))
            batch = tuple(int(v) for v in rng.integers(1, 4, int(rng.integers(0, 3))))
            a, b = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            scale = float(rng.choice([0.1, 1.0, 30.0]))
            q = Tensor(rng.standard_normal(batch + (a, d)) * scale, dtype=np.float32)
            kv = Tensor(rng.standard_normal(batch + (b, d)) * scale, dtype=np.float32)
            attend(q, kv, kv, heads)
        # attention inside a full forward pass goes through the same hook
        m = UAMobileFormer(tiny_model_config(), rng)
        m(rng.random((2, 2, 4, 8, 8)), rng=rng)
    report(3, calls >= 1000 and worst < 1e-6, f"{calls} attention calls, max |sum - 1| = {worst:.2e} < 1e-6")


def test_4_loss_analytics(report):
    errors = {}
    with T.default_dtype(np.float64):
        for k in (2, 10, 101):
            loss = cross_entropy(Tensor(np.zeros((5, k))), np.arange(5) % k).item()
            errors[k] = abs(loss - math.log(k))
    report(4, max(errors.values()) < 1e-9,
           "uniform-logit loss vs ln K: " + ", ".join(f"K={k} err {e:.1e}" for k, e in errors.items()))


def test_5_determinism(report):
    cfg = ModelConfig(num_frames=8, input_hw=(32, 32), stem_channels=4, channel_schedule=(4, 8), num_blocks=2,
                      num_tokens=3, token_dim=8, num_heads=2, head_hidden=16)
    data = StreamData(synth_dataset(6, 21), synth_dataset(2, 22))
    train_set, val_set = data.datasets(cfg.num_frames, cfg.input_hw)
    tcfg = TrainConfig(lr=1e-3, epochs=5, batch_size=8, seed=5)
    m1, m2 = build_model(cfg, 5), build_model(cfg, 5)
    r1 = train(m1, train_set, tcfg, val_set)
    r2 = train(m2, train_set, tcfg, val_set)
    curves = r1.loss_curve == r2.loss_curve and r1.step_losses == r2.step_losses and len(r1.epochs) == 5
    x = val_set.x
    a, b = m1.predict(x), m1.predict(x)
    twin = m2.predict(x)
    restored = model_from_checkpoint(decode(encode(to_checkpoint(m1)))).predict(x)
    logits = np.array_equal(a, b) and np.array_equal(a, twin) and np.array_equal(a, restored)
    report(5, curves and logits, f"5-epoch loss curves identical: {curves}; eval logits identical across runs, "
                                 f"twin model and checkpoint round-trip: {logits}")


def test_6_desk_scale_learning(report, tmp_path):
    cfg = desk_config(str(tmp_path))
    start = time.perf_counter()
    train_set, val_set = cfg.data.load().datasets(cfg.model.num_frames, cfg.model.input_hw)
    assert (len(train_set), len(val_set)) == (200, 80) and train_set.x.shape[1:] == (2, 8, 64, 64)
    assert cfg.model.num_blocks == 4 and cfg.train.epochs == 30
    model = build_model(cfg.model, cfg.train.seed)
    run = train(model, train_set, cfg.train, val_set, tmp_path)
    elapsed = time.perf_counter() - start
    last = run.epochs[-1]
    ok = last.train_top1 >= 0.95 and last.val_top1 >= 0.80 and len(run.epochs) <= 30 and elapsed < 600
    report(6, ok, f"train top-1 {last.train_top1:.3f} >= 0.95, val top-1 {last.val_top1:.3f} >= 0.80 "
                  f"after {len(run.epochs)} epochs (<= 30), {elapsed:.0f}s < 600s")


def test_7_ablation_harness(report, tmp_path):
    base = ModelConfig(num_frames=4, input_hw=(16, 16), stem_channels=4, channel_schedule=(4, 8), num_blocks=2,
                       num_tokens=2, token_dim=8, num_heads=2, head_hidden=16)
    data = StreamData(synth_dataset(2, 0), synth_dataset(1, 1))
    results = run_ablation(data, base, TrainConfig(epochs=1, batch_size=8, max_steps=1),
                           out_csv=tmp_path / "ablation.csv")
    inventories = [set(parameter_inventory(UAMobileFormer(r.config))) for r in results]
    distinct = len({r.report.config_hash for r in results}) == 5 and len({frozenset(i) for i in inventories}) == 5

    def has(inv, marker):
        return any(marker in n for n in inv)

    toggles_ok = True
    for r, inv in zip(results, inventories):
        row = r.row
        toggles_ok &= has(inv, ".mobile.") == row.mobile
        toggles_ok &= ("tokens" in inv) == row.former
        toggles_ok &= has(inv, ".bridge.") == row.uab
        toggles_ok &= has(inv, ".mobile_to_former.") == row.ca
        toggles_ok &= has(inv, ".act1.") == row.dy_relu
    header = (tmp_path / "ablation.csv").read_text().splitlines()
    columns_ok = header[0].split(",") == ABLATION_COLUMNS and len(header) == 6
    reference = [r.paper_result for r in TABLE_IV_ROWS] == [76.53, 58.01, 76.83, 77.94, 79.80]
    report(7, distinct and toggles_ok and columns_ok and reference,
           f"5 distinct configs: {distinct}; inventories follow toggles: {toggles_ok}; "
           f"CSV columns {header[0]}; reference ordering recorded (not asserted on synthetic data)")


def test_8_stem_shape_parity(report):
    cfg = ModelConfig(num_frames=8, input_hw=(224, 224), stem_channels=24, channel_schedule=(24,), num_blocks=1,
                      token_dim=8, num_heads=2)
    model = UAMobileFormer(cfg)
    out = stem(model, np.zeros((1, 2, 8, 224, 224), dtype=np.float32))
    ok = out.shape == (1, 24, 4, 112, 112) and ModelConfig().stem_channels == 24
    report(8, ok, f"stem output {out.shape[1:]} == (24, 4, 112, 112)")


def test_9_benchmarks_documented_not_reproduced(report, tmp_path):
    # The real datasets are not available; the harness that would reproduce the
    # numbers must still run end to end on substitute data.
    base = ModelConfig(num_frames=4, input_hw=(16, 16), stem_channels=4, channel_schedule=(4, 8), num_blocks=2,
                       num_tokens=2, token_dim=8, num_heads=2, head_hidden=16)
    data = StreamData(synth_dataset(1, 0), synth_dataset(1, 1))
    rows = run_sweep("tokens", data, base, TrainConfig(epochs=1, batch_size=4, max_steps=1),
                     out_csv=tmp_path / "sweep.csv")
    grids = SWEEP_GRIDS["tokens"] == (1, 3, 6, 9) and SWEEP_GRIDS["frames"] == (4, 8, 12)
    recorded = BENCHMARK_RESULTS == {"ASL-DVS": 0.999, "N-Caltech101": 0.798, "DVS128-Gait-Day": 0.959}
    recorded &= SWEEP_PAPER_RESULTS["blocks"] == {9: 74.22, 12: 79.85, 14: 72.87}
    ok = len(rows) == 4 and grids and recorded
    report(9, ok, "benchmark accuracies recorded as reference only (datasets out of scope); "
                  f"sweep harness ran {len(rows)} token settings")
