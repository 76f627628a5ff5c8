"""Randomized property tests (hypothesis)."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from uamf import tensor as T
from uamf.blocks import attend
from uamf.events import EventStream, rasterize, split_stream, stack_frames
from uamf.tensor import Tensor
from uamf.training import top1_from_logits

settings.register_profile("uamf", deadline=None, max_examples=60)
settings.load_profile("uamf")


@st.composite
def streams(draw, max_events=200):
    w, h = draw(st.integers(1, 12)), draw(st.integers(1, 12))
    n = draw(st.integers(1, max_events))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, draw(st.integers(1, 10_000)), n))
    return EventStream(w, h, rng.integers(0, w, n), rng.integers(0, h, n), t, rng.choice([-1, 1], n))


@given(streams(), st.integers(1, 12))
def test_split_is_a_partition(s, m):
    parts = split_stream(s, m)
    assert len(parts) == m
    assert np.array_equal(np.concatenate([p.t for p in parts]), s.t)
    assert np.array_equal(np.concatenate([p.x for p in parts]), s.x)


@given(streams(), st.integers(0, 1000))
def test_rasterize_invariant_to_order(s, seed):
    # timestamps must stay sorted, so shuffle the (x, y, p) columns of a single-instant tube
    perm = np.random.default_rng(seed).permutation(len(s))
    zeros = np.zeros(len(s), dtype=np.int64)
    tube = EventStream(s.width, s.height, s.x, s.y, zeros, s.p)
    shuffled = EventStream(s.width, s.height, s.x[perm], s.y[perm], zeros, s.p[perm])
    a = rasterize(tube, s.height, s.width)
    assert np.array_equal(a, rasterize(shuffled, s.height, s.width))
    assert a.min() >= 0 and a.max() <= 1


@given(streams(), st.integers(1, 8))
def test_frame_counts_conserved(s, m):
    frames = stack_frames(s, m, normalize=False)
    assert frames.tensor.sum() == len(s)
    assert frames.tensor.shape == (m, 2, s.height, s.width)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_attention_rows_sum_to_one(heads, per_head, a, b, seed):
    rng = np.random.default_rng(seed)
    d = heads * per_head
    seen = []
    from uamf.blocks import attention_hook
    with attention_hook(seen.append):
        out = attend(Tensor(rng.standard_normal((2, a, d)) * 5), Tensor(rng.standard_normal((2, b, d))),
                     Tensor(rng.standard_normal((2, b, d))), heads)
    assert out.shape == (2, a, d)
    np.testing.assert_allclose(seen[0].sum(axis=-1), 1.0, atol=1e-6)


@given(st.integers(1, 6), st.integers(2, 9), st.floats(-50, 50), st.integers(0, 2**31))
def test_softmax_shift_invariance(rows, cols, shift, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 4
    with T.default_dtype(np.float64):
        a = T.softmax(Tensor(x), axis=1).data
        b = T.softmax(Tensor(x + shift), axis=1).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)


@given(st.integers(1, 30), st.integers(2, 6), st.integers(0, 2**31))
def test_top1_bounded_and_monotone_invariant(n, k, seed):
    rng = np.random.default_rng(seed)
    logits, labels = rng.standard_normal((n, k)), rng.integers(0, k, n)
    acc = top1_from_logits(logits, labels)
    assert 0.0 <= acc <= 1.0
    assert top1_from_logits(2.0 * logits ** 3 + 1.0, labels) == acc
