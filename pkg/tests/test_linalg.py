import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowrank_quant.linalg import (
    LowRankPair,
    low_rank_from_svd,
    svd,
    truncated_svd,
    truncated_svd_full,
)
from lowrank_quant.tensor import Rng, fro_norm


def check_invariants(a, res):
    a = np.asarray(a, dtype=float)
    k = min(a.shape)
    assert res.u.shape == (a.shape[0], k) and res.v.shape == (k, a.shape[1])
    assert np.all(np.diff(res.s) <= 0) and np.all(res.s >= 0)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(k), atol=1e-9)
    np.testing.assert_allclose(res.v @ res.v.T, np.eye(k), atol=1e-9)
    assert fro_norm(a - res.reconstruct()) <= 1e-8 * max(fro_norm(a), 1e-300)


class TestSvdExamples:
    def test_diagonal(self):
        np.testing.assert_allclose(svd(np.diag([3.0, 2.0, 1.0])).s, [3, 2, 1], atol=1e-15)

    def test_rank_one(self):
        res = svd([[2.0, 4.0], [1.0, 2.0]])
        np.testing.assert_allclose(res.s, [5.0, 0.0], atol=1e-14)
        check_invariants([[2.0, 4.0], [1.0, 2.0]], res)

    def test_orthogonal(self):
        q, _ = np.linalg.qr(Rng(2).standard_normal(7, 7))
        np.testing.assert_allclose(svd(q).s, np.ones(7), atol=1e-13)

    def test_zero_matrix_gives_orthonormal_factors(self):
        res = svd(np.zeros((4, 3)))
        assert np.array_equal(res.s, np.zeros(3))
        check_invariants(np.zeros((4, 3)), res)

    def test_empty(self):
        res = svd(np.zeros((3, 0)))
        assert res.u.shape == (3, 0) and res.s.shape == (0,)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            svd([[1.0, np.nan]])


@pytest.mark.parametrize("shape", [(1, 1), (1, 5), (5, 1), (6, 6), (13, 7), (7, 13), (40, 64), (64, 40)])
def test_invariants_and_values_against_lapack(shape):
    a = Rng(shape[0] * 100 + shape[1]).standard_normal(*shape)
    res = svd(a)
    check_invariants(a, res)
    np.testing.assert_allclose(res.s, np.linalg.svd(a, compute_uv=False), rtol=1e-12, atol=1e-12)


@given(
    st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32), st.sampled_from([1e-6, 1.0, 1e6])
)
@settings(max_examples=60, deadline=None)
def test_invariants_property(m, n, seed, scale):
    a = Rng(seed).standard_normal(m, n) * scale
    check_invariants(a, svd(a))


@pytest.mark.parametrize("shape", [(9, 4), (4, 9)])
def test_rank_deficient(shape):
    r = Rng(8)
    a = r.standard_normal(shape[0], 2) @ r.standard_normal(2, shape[1])
    res = svd(a)
    check_invariants(a, res)
    assert res.s[2:].max() <= 1e-12 * res.s[0]


def test_sign_convention():
    res = svd(Rng(4).standard_normal(10, 6))
    for j in range(6):
        col = res.u[:, j]
        i = int(np.argmax(np.abs(col)))
        assert col[i] > 0


def test_deterministic_bitwise():
    a = Rng(5).standard_normal(20, 30)
    r1, r2 = svd(a), svd(a)
    for f in ("u", "s", "v"):
        assert np.array_equal(getattr(r1, f), getattr(r2, f))


@pytest.mark.parametrize("shape", [(24, 40), (40, 24), (16, 16)])
def test_warm_start_matches_cold(shape):
    r = Rng(6)
    a = r.standard_normal(*shape)
    b = a + 0.01 * r.standard_normal(*shape)
    cold = svd(b)
    warm = svd(b, warm=svd(a))
    check_invariants(b, warm)
    np.testing.assert_allclose(warm.s, cold.s, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(warm.reconstruct(), b, atol=1e-12)


def test_warm_start_leaves_previous_result_untouched():
    r = Rng(7)
    a = r.standard_normal(12, 8)
    prev = svd(a)
    v = prev.v.copy()
    svd(a + r.standard_normal(12, 8), warm=prev)
    assert np.array_equal(prev.v, v)


def test_warm_start_with_wrong_shape_is_ignored():
    a = Rng(7).standard_normal(6, 5)
    res = svd(a, warm=svd(np.eye(3)))
    check_invariants(a, res)


@pytest.mark.parametrize("shape", [(30, 20), (20, 30)])
def test_leading_vectors_match_full(shape):
    a = Rng(9).standard_normal(*shape)
    full, part = svd(a), svd(a, leading=5)
    assert np.array_equal(full.s, part.s)
    np.testing.assert_array_equal(part.u[:, :5], full.u[:, :5])
    np.testing.assert_array_equal(part.v[:5], full.v[:5])


class TestTruncated:
    def test_rank_one_exact(self):
        _, resid = truncated_svd([[2.0, 4.0], [1.0, 2.0]], 1)
        assert fro_norm(resid) <= 1e-10

    def test_diagonal_residual(self):
        pair, resid = truncated_svd(np.diag([3.0, 2.0, 1.0]), 1)
        assert fro_norm(resid) == pytest.approx(np.sqrt(5.0), rel=1e-14)
        assert pair.rank == 1

    def test_rank_zero(self):
        a = Rng(1).standard_normal(4, 5)
        pair, resid = truncated_svd(a, 0)
        assert pair.l1.shape == (4, 0) and pair.l2.shape == (0, 5)
        assert np.array_equal(resid, a)
        assert np.array_equal(pair.product(), np.zeros((4, 5)))
        assert truncated_svd_full(a, 0)[2] is None

    @pytest.mark.parametrize("r", [-1, 6])
    def test_rank_out_of_range(self, r):
        with pytest.raises(ValueError, match="out of range"):
            truncated_svd(np.zeros((5, 7)), r)

    def test_factor_layout(self):
        a = Rng(2).standard_normal(8, 6)
        pair, resid, res = truncated_svd_full(a, 3)
        np.testing.assert_array_equal(pair.l1, res.u[:, :3] * res.s[:3])
        np.testing.assert_array_equal(pair.l2, res.v[:3])
        np.testing.assert_allclose(pair.product() + resid, a, atol=1e-14)

    @given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**32), st.data())
    @settings(max_examples=60, deadline=None)
    def test_residual_norm_identity(self, m, n, seed, data):
        r = data.draw(st.integers(0, min(m, n)))
        a = Rng(seed).standard_normal(m, n)
        _, resid, res = truncated_svd_full(a, r)
        s = np.linalg.svd(a, compute_uv=False)
        assert fro_norm(resid) == pytest.approx(np.sqrt(np.sum(s[r:] ** 2)), rel=1e-8, abs=1e-12)
        assert fro_norm(resid) ** 2 + np.sum(s[:r] ** 2) == pytest.approx(fro_norm(a) ** 2, rel=1e-8)

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_eckart_young_against_random_competitors(self, r):
        g = np.random.default_rng(r)
        a = g.standard_normal((6, 6))
        best = fro_norm(truncated_svd(a, r)[1])
        comp = g.standard_normal((1000, 6, r)) @ g.standard_normal((1000, r, 6))
        assert np.all(np.linalg.norm(a - comp, axis=(1, 2)) >= best)

    def test_matches_lapack_truncation(self):
        a = Rng(3).standard_normal(12, 9)
        u, s, vt = np.linalg.svd(a)
        pair, _ = truncated_svd(a, 4)
        np.testing.assert_allclose(pair.product(), (u[:, :4] * s[:4]) @ vt[:4], atol=1e-12)


def test_low_rank_pair_validation():
    with pytest.raises(ValueError):
        LowRankPair(np.zeros((3, 2)), np.zeros((3, 4)))
    pair = LowRankPair.empty(3, 4)
    assert pair.rank == 0 and pair.shape == (3, 4)


def test_low_rank_from_svd_bounds():
    res = svd(np.eye(3))
    with pytest.raises(ValueError):
        low_rank_from_svd(res, 4)
