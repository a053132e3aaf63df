import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnmem import numeric as nc
from attnmem.errors import ContractError, DimensionError
from attnmem.numeric import AdamState, Tensor, adam_step, backward

from gradcheck import check_op


def T(x):
    return Tensor(np.array(x, dtype=np.float32))


class TestMatmul:
    def test_identity(self):
        out = nc.matmul(T([[1, 0], [0, 1]]), T([[3, 4], [5, 6]]))
        assert out.data.tolist() == [[3, 4], [5, 6]]

    def test_hand_product(self):
        assert nc.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11]]

    def test_zero(self):
        b = np.random.default_rng(0).normal(size=(3, 2))
        assert not nc.matmul(Tensor(np.zeros((2, 3))), T(b)).data.any()

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_identity_is_exact(self):
        a = np.random.default_rng(1).normal(size=(5, 7)).astype(np.float32)
        out = nc.matmul(Tensor(np.eye(5, dtype=np.float32)), Tensor(a))
        assert np.array_equal(out.data, a)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nc.softmax_rows(T([[0, 0, 0]])).data, [[1 / 3] * 3], rtol=1e-6)

    def test_large_logits_stable(self):
        out = nc.softmax_rows(T([[1000, 0]])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1, 0]], atol=1e-7)

    def test_ln2(self):
        np.testing.assert_allclose(nc.softmax_rows(T([[math.log(2), 0]]), 1.0).data, [[2 / 3, 1 / 3]], rtol=1e-6)

    def test_scale_must_be_positive(self):
        with pytest.raises(ContractError):
            nc.softmax_rows(T([[1, 2]]), scale=0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.floats(0.1, 1.0), st.integers(0, 2**31))
    def test_rows_sum_to_one(self, m, n, scale, seed):
        x = np.random.default_rng(seed).uniform(-50, 50, size=(m, n)).astype(np.float32) / scale
        out = nc.softmax_rows(Tensor(x), scale).data
        assert np.all(np.abs(out.sum(axis=1) - 1) < 1e-6)


class TestLayerNorm:
    def test_constant_vector(self):
        out = nc.layer_norm(T([[3, 3, 3, 3]]), T([1] * 4), T([0] * 4), 1e-5)
        assert np.abs(out.data).max() == 0

    def test_two_values(self):
        out = nc.layer_norm(T([[1, -1]]), T([1, 1]), T([0, 0]), 1e-12)
        np.testing.assert_allclose(out.data, [[1, -1]], rtol=1e-5)

    def test_zero_gain_gives_bias(self):
        x = np.random.default_rng(0).normal(size=(3, 5))
        b = np.arange(5, dtype=np.float32)
        out = nc.layer_norm(T(x), T(np.zeros(5)), T(b), 1e-5)
        assert np.array_equal(out.data, np.broadcast_to(b, (3, 5)))

    def test_normalized_moments(self):
        x = np.random.default_rng(2).normal(3, 4, size=(6, 16)).astype(np.float32)
        out = nc.layer_norm(T(x), T(np.ones(16)), T(np.zeros(16)), 1e-5).data
        assert np.abs(out.mean(-1)).max() < 1e-5
        assert np.abs(out.var(-1) - 1).max() < 1e-4


class TestCrossEntropy:
    def test_uniform(self):
        assert float(nc.cross_entropy(T(np.zeros((3, 4))), [0, 1, 3]).data) == pytest.approx(math.log(4), rel=1e-6)

    def test_confident_target(self):
        assert float(nc.cross_entropy(T([[80.0, 0, 0]]), [0]).data) == pytest.approx(0.0, abs=1e-6)

    def test_hand_value(self):
        expected = -math.log(math.e / (math.e + 1))
        assert float(nc.cross_entropy(T([[1, 0]]), [0]).data) == pytest.approx(expected, rel=1e-6)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            nc.cross_entropy(T([[1, 0]]), [2])

    def test_ignore_index(self):
        a = float(nc.cross_entropy(T([[1, 0], [5, 0]]), [0, -1], ignore_index=-1).data)
        assert a == pytest.approx(-math.log(math.e / (math.e + 1)), rel=1e-6)


class TestBackward:
    def test_square(self):
        x = Tensor(np.array(3.0, dtype=np.float32), requires_grad=True)
        backward(x * x)
        assert float(x.grad) == 6.0

    def test_sum_of_product(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = rng.normal(size=(3, 4))
        backward((a * Tensor(b)).sum())
        np.testing.assert_allclose(a.grad, b)

    def test_matmul_sum_grad_pattern(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = rng.normal(size=(3, 4))
        backward(nc.matmul(a, Tensor(b)).sum())
        np.testing.assert_allclose(a.grad, np.tile(b.sum(axis=1), (2, 1)))

    def test_disconnected_parameter(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        backward((x * 2.0).sum())
        assert y.grad is None or not y.grad.any()

    def test_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_reused_node_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        backward((y + y).sum())
        assert x.grad.tolist() == [8.0]


class TestAdam:
    def _param(self):
        return Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32), requires_grad=True)

    def test_zero_grad_leaves_params(self):
        p = self._param()
        before = p.data.copy()
        s = AdamState.for_params([p], lr=0.1)
        adam_step(s, [p], [np.zeros(3, dtype=np.float32)])
        assert np.array_equal(p.data, before)
        assert s.step == 1

    def test_first_step_is_signed_lr(self):
        p = self._param()
        g = np.array([0.5, -3.0, 1e-2], dtype=np.float32)
        s = AdamState.for_params([p], lr=0.01, eps=1e-8)
        before = p.data.copy()
        adam_step(s, [p], [g])
        # closed form: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        expected = before - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-6)

    def test_deterministic(self):
        g = np.array([0.1, 0.2, -0.3], dtype=np.float32)
        p = self._param()
        s = AdamState.for_params([p], lr=0.05)
        adam_step(s, [p], [g])
        results = []
        for _ in range(2):
            q, sq = copy.deepcopy(p), copy.deepcopy(s)
            adam_step(sq, [q], [g])
            results.append((q.data, sq.m[0], sq.v[0], sq.step))
        assert all(np.array_equal(a, b) for a, b in zip(results[0][:3], results[1][:3]))
        assert results[0][3] == results[1][3] == 2

    def test_shape_mismatch(self):
        p = self._param()
        s = AdamState.for_params([p])
        with pytest.raises(DimensionError):
            adam_step(s, [p], [np.zeros(4, dtype=np.float32)])


# Finite-difference property checks on every differentiable primitive.

shapes = st.tuples(st.integers(1, 8), st.integers(1, 8))


def _rand(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


PRIMITIVES = {
    "add": (lambda a, b: a + b, lambda s, m, n: [_rand(s, m, n), _rand(s + 1, 1, n)]),
    "mul": (lambda a, b: a * b, lambda s, m, n: [_rand(s, m, n), _rand(s + 1, m, n)]),
    "neg": (lambda a: -a, lambda s, m, n: [_rand(s, m, n)]),
    "matmul": (nc.matmul, lambda s, m, n: [_rand(s, m, n), _rand(s + 1, n, m)]),
    "transpose": (lambda a: a.transpose(1, 0), lambda s, m, n: [_rand(s, m, n)]),
    "reshape": (lambda a: a.reshape(-1), lambda s, m, n: [_rand(s, m, n)]),
    "sum": (lambda a: a.sum(axis=0), lambda s, m, n: [_rand(s, m, n)]),
    "mean": (lambda a: a.mean(axis=1), lambda s, m, n: [_rand(s, m, n)]),
    "getitem": (lambda a: a[: max(1, a.shape[0] // 2)], lambda s, m, n: [_rand(s, m, n)]),
    "softmax": (lambda a: nc.softmax_rows(a, 0.7), lambda s, m, n: [_rand(s, m, n)]),
    "masked_softmax": (
        lambda a: nc.softmax(nc.masked_fill(a, np.triu(np.ones(a.shape, bool), 1)), axis=-1),
        lambda s, m, n: [_rand(s, m, n)],
    ),
    "layer_norm": (lambda x, g, b: nc.layer_norm(x, g, b, 1e-5),
                   # a ramp keeps every row's variance well above the FD step
                   lambda s, m, n: [_rand(s, m, n + 1) * 0.3 + np.linspace(-1, 1, n + 1), _rand(s + 1, n + 1),
                                    _rand(s + 2, n + 1)]),
    "gelu": (nc.gelu, lambda s, m, n: [_rand(s, m, n) * 2]),
    "take_rows": (lambda w: nc.take_rows(w, [0, w.shape[0] - 1, 0]), lambda s, m, n: [_rand(s, m, n)]),
    "cross_entropy": (lambda x: nc.cross_entropy(x, [i % x.shape[1] for i in range(x.shape[0])]),
                      lambda s, m, n: [_rand(s, m, n) * 3]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=15, deadline=None)
@given(shape=shapes, seed=st.integers(0, 10_000))
def test_gradients_match_finite_differences(name, shape, seed):
    op, make = PRIMITIVES[name]
    assert check_op(op, make(seed, *shape), seed=seed) < 1e-3


def test_outputs_stay_finite():
    x = Tensor(np.array([[80.0, -80.0, 0.0]], dtype=np.float32))
    for out in (nc.softmax_rows(x), nc.gelu(x), nc.layer_norm(x, T([1, 1, 1]), T([0, 0, 0]))):
        assert np.isfinite(out.data).all()


def test_float32_default():
    assert Tensor([1, 2]).data.dtype == np.float32
