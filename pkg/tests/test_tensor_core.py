import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hst

from fhtensor.errors import CapacityError, DegenerateFactorError, ShapeError
from fhtensor.tensor_core import (
    DenseTensor,
    FactorSet,
    cp_als,
    khatri_rao,
    mode_permutation,
    nfe,
    normalize_factors,
    reconstruct_entry,
    reconstruct_full,
)


def outer_sum(factors):
    """Brute-force sum of rank-1 outer products."""
    K = factors[0].shape[1]
    out = 0.0
    for k in range(K):
        t = factors[0][:, k]
        for q in factors[1:]:
            t = np.multiply.outer(t, q[:, k])
        out = out + t
    return out


@hst.composite
def factor_sets(draw, max_modes=4, max_dim=5, max_rank=3):
    D = draw(hst.integers(1, max_modes))
    dims = draw(hst.lists(hst.integers(1, max_dim), min_size=D, max_size=D))
    K = draw(hst.integers(1, max_rank))
    seed = draw(hst.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return FactorSet([rng.normal(size=(n, K)) for n in dims])


def test_reconstruct_entry_rank_one():
    f = FactorSet([np.array([[2.0], [3.0]]), np.array([[5.0], [7.0]])])
    assert reconstruct_entry(f, (1, 0)) == 15.0


def test_zero_factor_annihilates(rng):
    f = FactorSet.random((3, 4, 2), 2, rng)
    f.factors[1][:] = 0.0
    for idx in itertools.product(range(3), range(4), range(2)):
        assert reconstruct_entry(f, idx) == 0.0


def test_reconstruct_entry_matches_outer_products(rng):
    f = FactorSet.random((3, 4, 6), 2, rng, pinned_time_row=True)
    ref = outer_sum(f.factors)
    for idx in itertools.product(range(3), range(4), range(6)):
        assert reconstruct_entry(f, idx) == pytest.approx(ref[idx], abs=1e-14)
    assert np.all(ref[:, :, -1] == 0.0)


def test_reconstruct_entry_bounds():
    f = FactorSet([np.ones((2, 1)), np.ones((3, 1))])
    with pytest.raises(IndexError):
        reconstruct_entry(f, (2, 0))
    with pytest.raises(IndexError):
        reconstruct_entry(f, (0,))


def test_reconstruct_full_small():
    f = FactorSet([np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])])
    np.testing.assert_array_equal(reconstruct_full(f).values, [3, 4, 6, 8])


def test_reconstruct_full_diagonal():
    f = FactorSet([np.eye(3), np.eye(3)])
    np.testing.assert_array_equal(reconstruct_full(f).array, np.eye(3))


def test_reconstruct_full_capacity(monkeypatch):
    import fhtensor.tensor_core as tc

    monkeypatch.setattr(tc, "MAX_DENSE_ELEMENTS", 10)
    with pytest.raises(CapacityError):
        reconstruct_full(FactorSet.random((4, 4), 1, 0))


def test_khatri_rao_examples():
    np.testing.assert_array_equal(khatri_rao([np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])]).ravel(),
                                  [3, 4, 6, 8])
    out = khatri_rao([np.eye(2), np.eye(2)])
    np.testing.assert_array_equal(out, [[1, 0], [0, 0], [0, 0], [0, 1]])


def test_khatri_rao_naive(rng):
    ms = [rng.normal(size=(2, 2)) for _ in range(3)]
    naive = np.zeros((8, 2))
    for k in range(2):
        for i, j, l in itertools.product(range(2), repeat=3):
            naive[i * 4 + j * 2 + l, k] = ms[0][i, k] * ms[1][j, k] * ms[2][l, k]
    np.testing.assert_allclose(khatri_rao(ms), naive, atol=1e-15)


def test_khatri_rao_rejects_mismatched_columns():
    with pytest.raises(ShapeError):
        khatri_rao([np.ones((2, 2)), np.ones((2, 3))])


def test_mode_permutation_examples():
    np.testing.assert_array_equal(mode_permutation((2, 3), 0), np.arange(6))
    np.testing.assert_array_equal(mode_permutation((2, 2), 1), [0, 2, 1, 3])


def test_mode_permutation_dense_rebuild(rng):
    dims = (2, 3, 2)
    f = FactorSet.random(dims, 2, rng)
    vec = reconstruct_full(f).values
    perm = mode_permutation(dims, 2)
    moded = np.empty_like(vec)
    moded[perm] = vec
    others = khatri_rao([f.factors[0], f.factors[1]])
    expected = f.factors[2] @ others.T  # row j_d holds the slice with index j_d
    np.testing.assert_allclose(moded.reshape(2, -1), expected, atol=1e-14)


@given(factor_sets())
def test_reconstruction_consistency(f):
    full = reconstruct_full(f).array
    for idx in itertools.product(*(range(n) for n in f.dims)):
        assert abs(full[idx] - reconstruct_entry(f, idx)) <= 1e-12 * max(1.0, abs(full[idx]))


@given(factor_sets())
def test_vectorization_identity(f):
    np.testing.assert_allclose(reconstruct_full(f).values, khatri_rao(f.factors) @ np.ones(f.rank),
                               atol=1e-12)


@given(factor_sets())
def test_matricization_identity(f):
    if f.ndim < 2:
        return
    vec = reconstruct_full(f).values
    for d in range(f.ndim):
        perm = mode_permutation(f.dims, d)
        moded = np.empty_like(vec)
        moded[perm] = vec
        others = [f.factors[i] for i in range(f.ndim) if i != d]
        ref = khatri_rao(others) @ f.factors[d].T
        np.testing.assert_allclose(moded.reshape(f.dims[d], -1).T, ref, atol=1e-12)


@given(factor_sets(), hst.floats(0.1, 10.0))
def test_scale_counter_scale(f, c):
    if f.ndim < 2:
        return
    before = reconstruct_full(f).values
    g = f.copy()
    g.factors[0] *= c
    g.factors[1] /= c
    np.testing.assert_allclose(reconstruct_full(g).values, before, atol=1e-12 * max(1, np.abs(before).max()))


def test_normalize_examples():
    f = FactorSet([np.full((2, 2), 0.5), np.full((2, 2), 0.5)])
    g = normalize_factors(f)
    np.testing.assert_array_equal(g.data, f.data)
    f = FactorSet([np.array([[4.0]]), np.array([[1.0]])])
    g = normalize_factors(f)
    np.testing.assert_allclose(g.norms(), [2.0, 2.0])
    assert math.prod(g.norms()) == pytest.approx(math.prod(f.norms()))


@given(factor_sets())
def test_normalize_preserves_entries(f):
    if np.any(f.norms() == 0):
        return
    g = normalize_factors(f)
    n = g.norms()
    np.testing.assert_allclose(n, n[0], rtol=1e-12)
    a, b = reconstruct_full(f).values, reconstruct_full(g).values
    np.testing.assert_allclose(b, a, atol=1e-10 * max(1.0, np.abs(a).max()))


def test_normalize_rejects_zero_factor():
    with pytest.raises(DegenerateFactorError):
        normalize_factors(FactorSet([np.zeros((2, 1)), np.ones((2, 1))]))


def test_nfe_examples(rng):
    ref = DenseTensor.from_array(rng.normal(size=(3, 4)))
    assert nfe(ref, ref) == 0.0
    assert nfe(DenseTensor(ref.dims, 2 * ref.values), ref) == pytest.approx(1.0)
    assert nfe(DenseTensor(ref.dims, np.zeros(12)), ref) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        nfe(np.zeros((4, 3)), ref)
    with pytest.raises(ZeroDivisionError):
        nfe(ref, np.zeros((3, 4)))


def test_factor_set_invariants(rng):
    f = FactorSet.random((3, 4, 6), 5, rng, pinned_time_row=True)
    assert [q.shape for q in f.factors] == [(3, 5), (4, 5), (6, 5)]
    assert np.all(f.factors[-1][-1] == 0.0)
    assert f.param_count == 13 * 5
    g = FactorSet.from_json(f.to_json())
    np.testing.assert_array_equal(g.data, f.data)
    assert g.pinned_time_row
    with pytest.raises(ShapeError):
        FactorSet([np.ones((2, 2)), np.ones((3, 1))])


def test_factors_are_views_of_data(rng):
    f = FactorSet.random((2, 3), 2, rng)
    f.data[:] = 1.0
    assert np.all(f.factors[1] == 1.0)


def test_cp_als_rank_one():
    rng = np.random.default_rng(3)
    f = FactorSet.random((3, 4, 5), 1, rng, scale=1.0)
    res = cp_als(reconstruct_full(f), 1, iters=50, seed=0)
    assert res.nfe < 1e-8


def test_cp_als_full_rank(rng):
    t = DenseTensor.from_array(rng.normal(size=(2, 3, 4)))
    res = cp_als(t, 6, iters=500, seed=1)
    assert res.nfe < 1e-6


def test_cp_als_monotone(rng):
    t = DenseTensor.from_array(rng.normal(size=(4, 4, 3)))
    errs = cp_als(t, 3, iters=100, seed=2, tol=0.0).fit_errors
    assert np.all(np.diff(errs) <= 1e-10)


def test_cp_als_gridworld_rank_20(grid_mdp):
    from fhtensor.mdp import exact_optimal_values

    target = exact_optimal_values(grid_mdp).to_tensor(grid_mdp)
    best = min(cp_als(target, 20, iters=300, seed=s, pinned_last_row=True).nfe for s in range(5))
    assert best < 0.05


def test_cp_als_pinned_row_stays_zero(rng):
    t = np.abs(rng.normal(size=(3, 3, 4)))
    t[:, :, -1] = 0.0
    res = cp_als(t, 2, iters=20, seed=0, pinned_last_row=True)
    assert np.all(res.factors.factors[-1][-1] == 0.0)


def test_cp_als_seeded(rng):
    t = rng.normal(size=(3, 3, 3))
    a = cp_als(t, 2, iters=30, seed=7)
    b = cp_als(t, 2, iters=30, seed=7)
    np.testing.assert_array_equal(a.factors.data, b.factors.data)
