import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longclin import tensor as T

from .helpers import check_grads, numeric_grad


def rand(rng, *shape):
    return rng.standard_normal(shape)


class TestMatmul:
    def test_identity(self):
        x = np.arange(9.0).reshape(3, 3)
        out = T.matmul(T.tensor(np.eye(3)), T.tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_small_identity_right(self):
        out = T.tensor([[1.0, 2.0], [3.0, 4.0]]) @ T.tensor([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((4, 5))))

    def test_gradient_of_sum(self):
        rng = np.random.default_rng(0)
        a, b = T.parameter(rand(rng, 5, 7)), T.tensor(rand(rng, 7, 3))
        T.backward(T.sum_(T.matmul(a, b)))
        # d sum(ab) / da = 1 b^T: every row equals the row sums of b
        np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (5, 1)), rtol=1e-12)
        num = numeric_grad(lambda: T.sum_(T.matmul(a, b)).item(), a, step=1e-5)
        np.testing.assert_allclose(a.grad, num, rtol=1e-6)


class TestMaskedSoftmax:
    def test_uniform(self):
        out = T.masked_softmax(T.tensor(np.zeros((4, 4))), np.ones((4, 4), bool))
        np.testing.assert_allclose(out.data, 0.25)

    def test_masked_pair(self):
        out = T.masked_softmax(T.tensor([[10.0, 10.0, -np.inf]]), np.array([[True, True, False]]))
        np.testing.assert_array_equal(out.data, [[0.5, 0.5, 0.0]])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        s = rand(rng, 6, 6)
        mask = rng.random((6, 6)) < 0.5
        mask[np.arange(6), np.arange(6)] = True
        out = T.masked_softmax(T.tensor(s), mask).data
        for i in range(6):
            e = np.array([math.exp(s[i, j]) if mask[i, j] else 0.0 for j in range(6)])
            np.testing.assert_allclose(out[i], e / e.sum(), atol=1e-9)

    def test_degenerate_row(self):
        mask = np.ones((3, 3), bool)
        mask[1] = False
        with pytest.raises(T.DegenerateRowError):
            T.masked_softmax(T.tensor(np.zeros((3, 3))), mask)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 9), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one_and_masked_zero(self, n, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((n, n)) < 0.4
        mask[np.arange(n), rng.integers(0, n, n)] = True
        out = T.masked_softmax(T.tensor(rand(rng, n, n) * 30), mask).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert (out[~mask] == 0.0).all()

    def test_gradient(self):
        rng = np.random.default_rng(2)
        s = T.parameter(rand(rng, 5, 5))
        mask = rng.random((5, 5)) < 0.6
        mask[np.arange(5), np.arange(5)] = True
        w = rand(rng, 5, 5)
        check_grads(lambda: T.sum_(T.multiply(T.masked_softmax(s, mask), T.tensor(w))), [s])


class TestLayerNorm:
    def test_constant_vector(self):
        out = T.layer_norm(T.tensor(np.full((1, 4), 3.0)), T.tensor(np.ones(4)), T.tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_values(self):
        out = T.layer_norm(T.tensor([[1.0, -1.0]]), T.tensor(np.ones(2)), T.tensor(np.zeros(2))).data
        delta = 1.0 - 1.0 / math.sqrt(1.0 + T.LN_EPS)
        np.testing.assert_allclose(out[0], [1 - delta, -1 + delta], rtol=1e-12)
        np.testing.assert_allclose(out[0], [1, -1], atol=1e-3)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x, g, b = T.parameter(rand(rng, 4, 6)), T.parameter(rand(rng, 6)), T.parameter(rand(rng, 6))
        w = rand(rng, 4, 6)
        check_grads(lambda: T.sum_(T.multiply(T.layer_norm(x, g, b), T.tensor(w))), [x, g, b],
                    rtol=1e-5)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy(T.tensor(np.zeros((3, 256))), [0, 17, 255])
        assert loss.item() == pytest.approx(math.log(256), abs=1e-12)
        assert round(math.log(256), 4) == 5.5452

    def test_confident_logit(self):
        # loss = log(1 + (c - 1) e^-20), below 1e-8 for up to five classes
        logits = np.zeros((1, 4))
        logits[0, 2] = 20.0
        loss = T.cross_entropy(T.tensor(logits), [2]).item()
        assert loss < 1e-8
        assert loss == pytest.approx(math.log1p(3 * math.exp(-20)), rel=1e-6)

    def test_log_sum_exp_oracle(self):
        rng = np.random.default_rng(4)
        z = rand(rng, 8, 5)
        y = rng.integers(0, 5, 8)
        expected = np.mean([math.log(sum(math.exp(v) for v in z[i])) - z[i, y[i]] for i in range(8)])
        assert T.cross_entropy(T.tensor(z), y).item() == pytest.approx(expected, abs=1e-9)

    def test_ignore_index(self):
        z = np.random.default_rng(5).standard_normal((4, 3))
        full = T.cross_entropy(T.tensor(z[[0, 2]]), [1, 2]).item()
        assert T.cross_entropy(T.tensor(z), [1, -100, 2, -100]).item() == pytest.approx(full)

    def test_all_ignored(self):
        with pytest.raises(T.EmptyLossError):
            T.cross_entropy(T.tensor(np.zeros((2, 3))), [-100, -100])

    def test_gradient(self):
        rng = np.random.default_rng(6)
        z = T.parameter(rand(rng, 6, 4))
        check_grads(lambda: T.cross_entropy(z, [0, 3, -100, 1, 2, 2]), [z])

    def test_binary_gradient(self):
        rng = np.random.default_rng(7)
        z = T.parameter(rand(rng, 2, 5) * 3)
        y = (rng.random((2, 5)) < 0.5).astype(float)
        check_grads(lambda: T.binary_cross_entropy(z, y), [z])


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.parameter(np.arange(6.0).reshape(2, 3))
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = T.parameter(np.random.default_rng(8).standard_normal(5))
        T.backward(T.multiply(T.sum_(T.multiply(x, x)), 0.5))
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)

    def test_non_scalar_loss(self):
        x = T.parameter(np.ones((2, 2)))
        with pytest.raises(T.RankError):
            T.backward(T.multiply(x, 2.0))

    def test_double_backward(self):
        x = T.parameter(np.ones(3))
        loss = T.sum_(T.multiply(x, x))
        T.backward(loss)
        with pytest.raises(T.TapeConsumedError):
            T.backward(loss)

    def test_leaf_grads_accumulate(self):
        x = T.parameter(np.ones(3))
        T.backward(T.sum_(x))
        T.backward(T.sum_(T.multiply(x, 2.0)))
        np.testing.assert_array_equal(x.grad, [3.0, 3.0, 3.0])

    def test_every_reachable_tensor_gets_grad(self):
        rng = np.random.default_rng(9)
        a, b = T.parameter(rand(rng, 3, 4)), T.parameter(rand(rng, 4, 2))
        h = T.matmul(a, b)
        g = T.gelu(h)
        loss = T.mean(g)
        tape = T.backward(loss)
        for t in (a, b, h, g, loss):
            assert t.grad is not None and t.grad.shape == t.shape
        ids = {r.node_id for r in tape.records}
        for r in tape.records:
            assert all(i < r.node_id for i in r.input_ids)
        assert h.node_id in ids and loss.node_id in ids

    def test_no_grad_records_nothing(self):
        x = T.parameter(np.ones(3))
        with T.no_grad():
            y = T.sum_(T.multiply(x, 3.0))
        assert not y.requires_grad and y.is_leaf

    def test_bitwise_determinism(self):
        def run():
            rng = np.random.default_rng(10)
            a, b = T.parameter(rand(rng, 7, 5)), T.parameter(rand(rng, 5, 7))
            T.backward(T.mean(T.gelu(T.matmul(a, b))))
            return a.grad.tobytes() + b.grad.tobytes()
        assert run() == run()


class TestOtherOps:
    def test_gelu_gradient(self):
        x = T.parameter(np.linspace(-3, 3, 13))
        check_grads(lambda: T.sum_(T.multiply(T.gelu(x), T.tensor(np.arange(13.0)))), [x])

    def test_gelu_values(self):
        x = np.array([-1.0, 0.0, 2.0])
        expected = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(T.gelu(T.tensor(x)).data, expected, rtol=1e-14)

    def test_embedding_gather_and_scatter(self):
        w = T.parameter(np.arange(12.0).reshape(4, 3))
        out = T.embedding(w, [1, 1, 3])
        np.testing.assert_array_equal(out.data, w.data[[1, 1, 3]])
        T.backward(T.sum_(out))
        np.testing.assert_array_equal(w.grad[:, 0], [0, 2, 0, 1])

    def test_concatenate_slice_reshape_gradients(self):
        rng = np.random.default_rng(11)
        a, b = T.parameter(rand(rng, 2, 3)), T.parameter(rand(rng, 4, 3))
        w = rand(rng, 3, 6)

        def f():
            c = T.concatenate([a, b], axis=0)
            s = T.slice_(c, np.array([0, 5, 5, 2]))
            return T.sum_(T.multiply(T.reshape(s, (3, 4)), T.tensor(w.reshape(3, 6)[:, :4])))
        check_grads(f, [a, b])

    def test_add_bias_and_mean_max(self):
        rng = np.random.default_rng(12)
        x, bias = T.parameter(rand(rng, 3, 4)), T.parameter(rand(rng, 4))
        check_grads(lambda: T.sum_(T.multiply(T.max_(T.add(x, bias), axis=0), 1.5)), [x, bias])
        check_grads(lambda: T.sum_(T.multiply(T.mean(T.add(x, bias), axis=1), 2.0)), [x, bias])

    def test_add_shape_error(self):
        with pytest.raises(T.ShapeError):
            T.add(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((3, 2))))

    def test_tolerance_constants(self):
        assert T.TOLERANCE[np.dtype(np.float64)] == 1e-10
        assert T.TOLERANCE[np.dtype(np.float32)] == 1e-5
