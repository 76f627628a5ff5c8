import numpy as np
import pytest

from uamf import tensor as T
from uamf.errors import ConfigError, DimensionError, UsageError
from uamf.gradcheck import check_gradients, run_op_checks
from uamf.tensor import Parameter, Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.default_dtype(np.float64):
        yield


def test_matmul_identity_and_dot():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_is_ones_times_bt():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)))
    T.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    res = check_gradients(lambda: T.matmul(a, b).sum(), [a, b])
    assert res.max_rel_error < 1e-4


def test_softmax_basic_cases():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-12)
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_rows_and_shift_invariance():
    x = np.random.default_rng(1).standard_normal((5, 7)) * 10
    s = T.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    shifted = T.softmax(Tensor(x + 123.4), axis=1).data
    np.testing.assert_allclose(s, shifted, atol=1e-6)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.zeros((3, 0))), axis=1)


def test_conv_pointwise_identity():
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 2, 4, 4)))
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1, 1))
    np.testing.assert_array_equal(T.conv3d(x, w).data, x.data)


def test_conv_all_ones_centre_is_27():
    out = T.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))))
    assert out.shape == (1, 1, 3, 3, 3)
    assert out.data[0, 0, 1, 1, 1] == 27.0
    assert out.data[0, 0, 0, 0, 0] == 8.0


def test_conv_group_mismatch():
    with pytest.raises(ConfigError):
        T.conv3d(Tensor(np.ones((1, 3, 2, 2, 2))), Tensor(np.ones((4, 1, 3, 3, 3))), groups=2)


def _brute_conv(x, w, stride, pad, groups):
    B, C, Tn, H, W = x.shape
    O, cg, kt, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0],) * 2, (pad[1],) * 2, (pad[2],) * 2))
    To = (Tn + 2 * pad[0] - kt) // stride[0] + 1
    Ho = (H + 2 * pad[1] - kh) // stride[1] + 1
    Wo = (W + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((B, O, To, Ho, Wo))
    og = O // groups
    for b in range(B):
        for o in range(O):
            g = o // og
            for t in range(To):
                for i in range(Ho):
                    for j in range(Wo):
                        patch = xp[b, g * cg:(g + 1) * cg, t * stride[0]:t * stride[0] + kt,
                                   i * stride[1]:i * stride[1] + kh, j * stride[2]:j * stride[2] + kw]
                        out[b, o, t, i, j] = np.sum(patch * w[o])
    return out


@pytest.mark.parametrize("stride,groups,cin,cout", [
    ((1, 1, 1), 1, 2, 3), ((1, 1, 1), 3, 3, 3), ((1, 2, 2), 3, 3, 3), ((2, 2, 2), 1, 2, 4), ((1, 1, 1), 2, 4, 2),
])
def test_conv_matches_brute_force(stride, groups, cin, cout):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, cin, 3, 5, 4))
    w = rng.standard_normal((cout, cin // groups, 3, 3, 3))
    out = T.conv3d(Tensor(x), Tensor(w), stride=stride, groups=groups).data
    np.testing.assert_allclose(out, _brute_conv(x, w, stride, (1, 1, 1), groups), atol=1e-12)


def test_depthwise_equals_per_channel_conv():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 2, 2, 2))
    w = rng.standard_normal((3, 1, 3, 3, 3))
    out = T.conv3d(Tensor(x), Tensor(w), groups=3).data
    for c in range(3):
        single = T.conv3d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1])).data
        np.testing.assert_allclose(out[:, c:c + 1], single, atol=1e-14)


def test_backward_trivial_cases():
    p = Parameter(np.array([1.0, 2.0]))
    p.sum().backward()
    np.testing.assert_array_equal(p.grad, [1.0, 1.0])
    p.grad = None
    (p * p).sum().backward()
    np.testing.assert_array_equal(p.grad, [2.0, 4.0])


def test_backward_accumulates():
    p = Parameter(np.array([1.0, 2.0]))
    (p * 3.0).sum().backward()
    (p * 3.0).sum().backward()
    np.testing.assert_array_equal(p.grad, [6.0, 6.0])


def test_backward_non_scalar_is_usage_error():
    p = Parameter(np.ones(3))
    with pytest.raises(UsageError):
        (p * 2.0).backward()


def test_two_layer_network_gradcheck():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((4, 3)))
    w1, b1 = Parameter(rng.standard_normal((3, 5))), Parameter(rng.standard_normal(5))
    w2 = Parameter(rng.standard_normal((5, 2)))

    def loss():
        return (T.linear(T.tanh(T.linear(x, w1, b1)), w2) ** 2).sum()

    assert check_gradients(loss, [w1, b1, w2]).max_rel_error < 1e-4


def test_every_op_passes_gradcheck():
    results = run_op_checks(seed=0)
    assert len(results) >= 25
    worst = {r.name: r.max_rel_error for r in results}
    assert max(worst.values()) < 1e-4, worst


def test_maximum_ties_route_gradient_to_first_argument():
    a, b = Parameter(np.array([1.0, 2.0])), Parameter(np.array([1.0, 0.0]))
    T.maximum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(6).standard_normal((3, 8)) * 5 + 2)
    out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), 1, atol=1e-4)


def test_concat_and_getitem_roundtrip():
    a, b = Tensor(np.arange(6.0).reshape(2, 3)), Tensor(np.arange(3.0).reshape(1, 3))
    c = T.concat([a, b], axis=0)
    np.testing.assert_array_equal(c[:2].data, a.data)


def test_gaussian_sample_seeded():
    a = T.gaussian_sample((4, 5), np.random.default_rng(9))
    b = T.gaussian_sample((4, 5), np.random.default_rng(9))
    assert a.dtype == np.float64
    np.testing.assert_array_equal(a.data, b.data)
    assert not a.requires_grad


def test_no_grad_builds_no_graph():
    p = Parameter(np.ones(3))
    with T.no_grad():
        y = (p * 2.0).sum()
    assert not y.requires_grad and y._parents == ()


def test_float32_default_outside_fixture():
    with T.default_dtype(np.float32):
        assert Tensor([1, 2]).dtype == np.float32
    with pytest.raises(ConfigError):
        T.set_default_dtype(np.int32)


def test_gradcheck_skips_kink_crossings():
    x = Parameter(np.array([0.0, 1.0, -1.0]))
    res = check_gradients(lambda: T.relu(x).sum(), [x])
    assert res.skipped == 1
    assert res.max_rel_error < 1e-8


def test_repeated_graph_is_deterministic():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 2, 4, 4))
    w = rng.standard_normal((3, 1, 3, 3, 3))
    a = T.conv3d(Tensor(x), Tensor(w), groups=3).data
    b = T.conv3d(Tensor(x), Tensor(w), groups=3).data
    assert np.array_equal(a, b)
