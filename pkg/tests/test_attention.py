import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longclin import tensor as T
from longclin.attention import (Full, PatternError, WindowGlobal, WindowGlobalRandom, attend,
                                brute_force_mask, build_plan, count_pairs, full_attention,
                                sparse_attention, track)
from longclin.attention import random_block_pairs


def qkv(rng, n, d, dtype=np.float64, grad=False):
    make = T.parameter if grad else T.tensor
    return [make(rng.standard_normal((n, d)).astype(dtype)) for _ in range(3)]


def dense_oracle(q, k, v, mask):
    """Row-by-row softmax with plain python sums."""
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        js = [j for j in range(n) if mask[i, j]]
        s = np.array([q[i] @ k[j] / math.sqrt(d) for j in js])
        w = np.exp(s - s.max())
        out[i] = (w[:, None] * v[js]).sum(axis=0) / w.sum()
    return out


def random_pattern(rng, n):
    w = int(rng.integers(0, n)) * 2 + 1
    g = tuple(sorted(set(rng.integers(0, n, int(rng.integers(0, 4))).tolist())))
    if rng.random() < 0.5:
        return WindowGlobal(w, g)
    return WindowGlobalRandom(w, g, int(rng.integers(1, 17)), int(rng.integers(0, 4)),
                              int(rng.integers(0, 1000)))


class TestPlans:
    def test_full_four(self):
        assert build_plan(Full(), 4).total_pairs == 16 == count_pairs(Full(), 4)

    def test_window_global_hand_enumeration(self):
        # band 13 + row/column 9 - overlap {(0,0), (0,1), (1,0)} = 19
        pattern = WindowGlobal(3, (0,))
        expected = {(i, j) for i in range(5) for j in range(5)
                    if abs(i - j) <= 1 or i == 0 or j == 0}
        plan = build_plan(pattern, 5)
        assert plan.total_pairs == 19 == len(expected) == count_pairs(pattern, 5)
        assert {(i, j) for i in range(5) for j in plan.row(i)} == expected

    def test_window_only_thirteen(self):
        assert count_pairs(WindowGlobal(3), 5) == 13

    def test_wide_window_is_full(self):
        for n in (1, 2, 7, 20):
            assert build_plan(WindowGlobal(2 * n - 1), n).total_pairs == n * n

    def test_rows_sorted_and_diagonal(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(1, 70))
            plan = build_plan(random_pattern(rng, n), n)
            for i in range(n):
                row = plan.row(i)
                assert row == sorted(set(row)) and i in row

    def test_global_symmetry(self):
        plan = build_plan(WindowGlobalRandom(5, (3, 10), 4, 2, 1), 40)
        mask = plan.dense_mask()
        assert mask[[3, 10]].all() and mask[:, [3, 10]].all()

    @pytest.mark.parametrize("seed", range(40))
    def test_plan_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 90))
        pattern = random_pattern(rng, n)
        np.testing.assert_array_equal(build_plan(pattern, n).dense_mask(),
                                      brute_force_mask(pattern, n))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 512), st.integers(0, 300), st.lists(st.integers(0, 511), max_size=6))
    def test_count_closed_form_vs_mask_sum(self, n, half, globals_):
        g = tuple(x for x in globals_ if x < n)
        pattern = WindowGlobal(2 * half + 1, g)
        i, j = np.ogrid[:n, :n]
        gs = np.zeros(n, bool)
        gs[list(g)] = True
        mask = (np.abs(i - j) <= half) | gs[:, None] | gs[None, :]
        assert count_pairs(pattern, n) == int(mask.sum())

    def test_linear_growth(self):
        pattern = WindowGlobal(33, (0,))
        for n in (1024, 2048, 4096):
            ratio = count_pairs(pattern, 2 * n) / count_pairs(pattern, n)
            assert abs(ratio - 2) < 0.05 * 2

    def test_errors(self):
        with pytest.raises(PatternError):
            WindowGlobal(4)
        with pytest.raises(PatternError):
            WindowGlobal(0)
        with pytest.raises(PatternError):
            WindowGlobalRandom(3, (), block_size=0)
        with pytest.raises(PatternError):
            WindowGlobalRandom(3, (), random_blocks=-1)
        with pytest.raises(PatternError):
            build_plan(WindowGlobal(3, (5,)), 5)
        with pytest.raises(PatternError):
            count_pairs(WindowGlobal(3, (5,)), 5)
        with pytest.raises(PatternError):
            build_plan(Full(), 0)


class TestRandomBlocks:
    def test_deterministic_per_seed_and_layer(self):
        pattern = WindowGlobalRandom(9, (0,), 8, 3, seed=11)
        again = WindowGlobalRandom(9, (0,), 8, 3, seed=11)
        assert random_block_pairs(pattern, 256, 2) == random_block_pairs(again, 256, 2)
        draws = {tuple(random_block_pairs(pattern, 256, layer)) for layer in range(4)}
        assert len(draws) == 4
        other = WindowGlobalRandom(9, (0,), 8, 3, seed=12)
        assert random_block_pairs(other, 256, 0) != random_block_pairs(pattern, 256, 0)

    def test_draw_constraints(self):
        pattern = WindowGlobalRandom(17, (0, 100), 8, 3, seed=5)
        n, b, half = 200, 8, 8
        picks = random_block_pairs(pattern, n, 0)
        by_row = {}
        for qb, kb in picks:
            by_row.setdefault(qb, []).append(kb)
        global_blocks = {0, 100 // b}
        for qb, kbs in by_row.items():
            assert qb not in global_blocks
            assert len(kbs) == len(set(kbs)) == 3
            for kb in kbs:
                assert kb not in global_blocks
                gap = max(0, kb * b - (qb * b + b - 1), qb * b - (kb * b + b - 1))
                assert gap > half
        assert set(by_row) == set(range(-(-n // b))) - global_blocks

    def test_no_random_blocks_equals_window_global(self):
        a = build_plan(WindowGlobalRandom(7, (2,), 4, 0), 50).dense_mask()
        b = build_plan(WindowGlobal(7, (2,)), 50).dense_mask()
        np.testing.assert_array_equal(a, b)


class TestKernels:
    def test_single_token(self):
        q, k, v = qkv(np.random.default_rng(0), 1, 4)
        np.testing.assert_allclose(full_attention(q, k, v, Full()).data, v.data, rtol=1e-15)
        np.testing.assert_allclose(sparse_attention(q, k, v, WindowGlobal(1)).data, v.data,
                                   rtol=1e-15)

    def test_full_matches_python_oracle(self):
        rng = np.random.default_rng(1)
        q, k, v = qkv(rng, 9, 4)
        out = full_attention(q, k, v, Full()).data
        np.testing.assert_allclose(out, dense_oracle(q.data, k.data, v.data, np.ones((9, 9), bool)),
                                   atol=1e-12)

    def test_small_orthonormal_queries_mix_uniformly(self):
        eye = np.eye(4) * 1e-3
        v = np.random.default_rng(2).standard_normal((4, 4))
        out = full_attention(T.tensor(eye), T.tensor(eye), T.tensor(v), Full()).data
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (4, 1)), atol=1e-5)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        q, k, v = qkv(rng, 8, 4)
        perm = rng.permutation(8)
        out = full_attention(q, k, v, Full()).data
        permuted = full_attention(*(T.tensor(t.data[perm]) for t in (q, k, v)), Full()).data
        np.testing.assert_allclose(permuted, out[perm], atol=1e-12)

    def test_two_global_window_instance(self):
        rng = np.random.default_rng(4)
        q, k, v = qkv(rng, 64, 8)
        pattern = WindowGlobal(9, (0, 1))
        dense = full_attention(q, k, v, build_plan(pattern, 64)).data
        assert np.abs(sparse_attention(q, k, v, pattern).data - dense).max() <= 1e-10
        oracle = dense_oracle(q.data, k.data, v.data, brute_force_mask(pattern, 64))
        assert np.abs(dense - oracle).max() <= 1e-10

    def test_wide_window_equals_unmasked(self):
        rng = np.random.default_rng(5)
        q, k, v = qkv(rng, 20, 6)
        a = sparse_attention(q, k, v, WindowGlobal(39)).data
        np.testing.assert_allclose(a, full_attention(q, k, v, Full()).data, atol=1e-10, rtol=0)

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
    def test_random_instances(self, dtype, tol):
        rng = np.random.default_rng(6)
        for _ in range(25):
            n, d = int(rng.integers(1, 129)), int(rng.integers(1, 33))
            heads = 2 if d % 2 == 0 and rng.random() < 0.5 else 1
            pattern = random_pattern(rng, n)
            q, k, v = qkv(rng, n, d, dtype)
            dense = full_attention(q, k, v, build_plan(pattern, n), heads).data
            sparse = sparse_attention(q, k, v, pattern, heads).data
            assert sparse.dtype == dtype
            assert np.abs(sparse - dense).max() <= tol

    def test_heads_are_independent_slices(self):
        rng = np.random.default_rng(7)
        q, k, v = qkv(rng, 16, 8)
        pattern = WindowGlobal(5, (0,))
        both = sparse_attention(q, k, v, pattern, heads=2).data
        for h in range(2):
            cols = slice(4 * h, 4 * h + 4)
            one = sparse_attention(*(T.tensor(t.data[:, cols]) for t in (q, k, v)), pattern).data
            np.testing.assert_allclose(both[:, cols], one, atol=1e-13)

    @pytest.mark.parametrize("seed", range(6))
    def test_gradient_parity(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(2, 65)), 4
        pattern = random_pattern(rng, n)
        w = rng.standard_normal((n, d))
        base = [rng.standard_normal((n, d)) for _ in range(3)]
        results = []
        for dense in (False, True):
            q, k, v = (T.parameter(x.copy()) for x in base)
            out = (full_attention(q, k, v, build_plan(pattern, n), 2) if dense
                   else sparse_attention(q, k, v, pattern, 2))
            T.backward(T.sum_(T.multiply(out, T.tensor(w))))
            results.append([q.grad, k.grad, v.grad])
        for a, b in zip(*results):
            np.testing.assert_allclose(a, b, atol=1e-8, rtol=0)

    def test_sparse_gradient_vs_finite_differences(self):
        from .helpers import check_grads
        rng = np.random.default_rng(8)
        q, k, v = qkv(rng, 12, 4, grad=True)
        w = T.tensor(rng.standard_normal((12, 4)))
        pattern = WindowGlobalRandom(3, (0,), 2, 1, seed=3)
        check_grads(lambda: T.sum_(T.multiply(sparse_attention(q, k, v, pattern), w)), [q, k, v])

    def test_sparse_rejects_full(self):
        q, k, v = qkv(np.random.default_rng(9), 4, 2)
        with pytest.raises(PatternError):
            sparse_attention(q, k, v, Full())

    def test_shape_errors(self):
        rng = np.random.default_rng(10)
        q, k, _ = qkv(rng, 4, 2)
        with pytest.raises(T.ShapeError):
            attend(q, k, T.tensor(np.zeros((5, 2))), WindowGlobal(3))
        with pytest.raises(T.ShapeError):
            attend(q, k, q, WindowGlobal(3), heads=3)


class TestCounters:
    def test_pair_counter_equals_plan(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            n = int(rng.integers(1, 100))
            pattern = random_pattern(rng, n)
            q, k, v = qkv(rng, n, 4)
            with track() as stats:
                sparse_attention(q, k, v, pattern)
            assert stats.calls == 1
            assert stats.pairs == build_plan(pattern, n).total_pairs == count_pairs(pattern, n)

    def test_full_materializes_square(self):
        q, k, v = qkv(np.random.default_rng(12), 30, 4)
        with track() as stats:
            full_attention(q, k, v, Full(), heads=2)
        assert stats.peak_score_elements == 2 * 30 * 30

    @pytest.mark.parametrize("n", [256, 1024, 2048])
    def test_memory_law(self, n):
        w, g, r, b = 33, 2, 3, 16
        pattern = WindowGlobalRandom(w, tuple(range(g)), b, r, seed=0)
        q, k, v = qkv(np.random.default_rng(13), n, 4, np.float32)
        with track() as stats, T.no_grad():
            sparse_attention(q, k, v, pattern)
        assert stats.peak_score_elements <= 2 * n * (w + 2 * g + r * b)

    def test_nested_trackers(self):
        q, k, v = qkv(np.random.default_rng(14), 10, 2)
        with track() as outer:
            with track() as inner:
                attend(q, k, v, WindowGlobal(3))
            attend(q, k, v, WindowGlobal(3))
        assert (inner.calls, outer.calls) == (1, 2)


def test_row_order_independence():
    # permuting which rows are computed first cannot change results: each row
    # reduces over its own segment only, so a row subset equals the full result
    rng = np.random.default_rng(15)
    q, k, v = qkv(rng, 40, 4)
    pattern = WindowGlobal(7, (0,))
    out = sparse_attention(q, k, v, pattern).data
    mask = brute_force_mask(pattern, 40)
    for i in itertools.islice(rng.permutation(40), 8):
        js = np.flatnonzero(mask[i])
        s = q.data[i] @ k.data[js].T / 2.0
        p = np.exp(s - s.max())
        np.testing.assert_allclose(out[i], p @ v.data[js] / p.sum(), atol=1e-12)
