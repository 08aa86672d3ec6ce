import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as hst

from fhtensor import exact_solver as ex
from fhtensor.errors import CapacityError, InvalidValueError
from fhtensor.mdp import (
    NonstationaryPolicy,
    TabularMDP,
    exact_optimal_values,
    exact_policy_evaluation,
    optimal_return,
    policy_return,
    random_mdp,
    random_policy,
)
from fhtensor.tensor_core import FactorSet, cp_als, khatri_rao, normalize_factors
from fhtensor.verify import fd_gradient, random_instance

seeds = hst.integers(0, 2**32 - 1)


def dense_q(m, f):
    return ex.q_table(m, f)


def exact_factors(m, p, seed=0):
    """Full-rank ALS fit of Q^pi (a factor model of the exact values)."""
    table = exact_policy_evaluation(m, p)
    K = m.n_pairs
    res = cp_als(table.to_tensor(m), K, iters=2000, seed=seed, tol=0.0, pinned_last_row=True)
    return res.factors


# ------------------------------------------------------------------ loss


def test_bellman_error_of_exact_values():
    rng = np.random.default_rng(0)
    m = random_mdp((3,), (2,), 2, rng)
    p = random_policy(m, rng)
    f = exact_factors(m, p)
    for h in range(m.horizon):
        for s in range(m.n_states):
            for a in range(m.n_actions):
                assert abs(ex.bellman_error(m, p, f, s, a, h)) < 1e-6
    assert ex.loss(m, p, f) < 1e-10
    assert ex.loss(m, p, exact_policy_evaluation(m, p)) < 1e-20


def test_zero_factors(rng):
    m = random_mdp((3,), (2,), 3, rng)
    p = random_policy(m, rng)
    f = FactorSet.zeros(m.tensor_dims, 2, pinned_time_row=True)
    assert ex.bellman_error(m, p, f, 1, 1, 0) == m.reward[3]
    assert ex.loss(m, p, f) == pytest.approx(float(m.reward @ m.reward))


def test_bellman_error_dense_oracle(rng):
    m = random_mdp((3,), (2,), 3, rng)
    p = random_policy(m, rng)
    f = FactorSet.random(m.tensor_dims, 2, rng, scale=1.0, pinned_time_row=True)
    q = dense_q(m, f)
    P = m.transition.toarray()
    for h in range(3):
        for s in range(3):
            for a in range(2):
                nxt = 0.0
                if h < 2:
                    nxt = sum(P[s * 2 + a, s2] * q[h + 1, s2, p.actions[h + 1, s2]] for s2 in range(3))
                want = m.reward[s * 2 + a] + nxt - q[h, s, a]
                assert ex.bellman_error(m, p, f, s, a, h) == pytest.approx(want, abs=1e-12)


@given(seeds)
def test_loss_system_identity(seed):
    m, p, f = random_instance(np.random.default_rng(seed))
    L = ex.loss(m, p, f)
    for d in range(f.ndim):
        sys = ex.build_bellman_system(m, p, f, d)
        assert abs(sys.value(f.factors[d]) - L) <= 1e-10 * max(L, 1e-300)


# ------------------------------------------------------------------ system assembly


def test_reward_vector(rng):
    m = random_mdp((3,), (2,), 1, rng)
    np.testing.assert_array_equal(ex.build_reward_vector(m), m.reward)
    m = random_mdp((3,), (2,), 4, rng)
    r = ex.build_reward_vector(m)
    assert r.size == m.n_pairs * 4
    for h in range(4):
        np.testing.assert_array_equal(r[h * 6:(h + 1) * 6], r[:6])


def test_coefficient_block_time_mode_selects_block(rng):
    m, p, f = random_instance(rng)
    T = f.ndim - 1
    blk = ex.build_coefficient_block(m, p, f, T, 1 if m.horizon > 1 else 0).toarray()
    h = 1 if m.horizon > 1 else 0
    mask = np.zeros(blk.shape[1], bool)
    mask[h * f.rank:(h + 1) * f.rank] = True
    assert np.all(blk[:, ~mask] == 0.0)


def test_coefficient_block_terminal_is_zero(rng):
    m, p, f = random_instance(rng)
    assert ex.build_coefficient_block(m, p, f, 0, m.horizon).nnz == 0


@given(seeds)
def test_coefficient_block_reconstructs_slice(seed):
    rng = np.random.default_rng(seed)
    m, p, f = random_instance(rng)
    q = dense_q(m, f)
    for d in range(f.ndim):
        for h in range(m.horizon + 1):
            blk = ex.build_coefficient_block(m, p, f, d, h)
            np.testing.assert_allclose(blk @ f.factors[d].ravel(), q[h].ravel(), atol=1e-12)


def test_system_single_step_deterministic():
    P = np.array([[1.0, 0.0], [0.0, 1.0]])
    m = TabularMDP((2,), (1,), 1, P, [1.0, 2.0])
    p = NonstationaryPolicy(np.zeros((1, 2), int))
    f = FactorSet.random(m.tensor_dims, 2, 0, pinned_time_row=True)
    d = f.ndim - 1
    sys = ex.build_bellman_system(m, p, f, d)
    c1 = ex.build_coefficient_block(m, p, f, d, 0)[:, :sys.n_rows * f.rank]
    np.testing.assert_array_equal(sys.cbar.toarray(), -c1.toarray())
    np.testing.assert_array_equal(sys.rbar, ex.build_reward_vector(m))


def test_capacity_guard(grid_mdp):
    p = random_policy(grid_mdp, 0)
    with pytest.raises(CapacityError):
        ex.bc_pe(grid_mdp, p, ex.PESettings(rank=5, memory_cap=1000))


# ------------------------------------------------------------------ block updates


def square_system(rng, n=6):
    C = rng.normal(size=(n, n))
    q = rng.normal(size=n)
    return ex.BellmanSystem(-C @ q, sp.csr_matrix(C), 0, n, 1, 1), q


def test_bcd_exact_solve(rng):
    sys, q = square_system(rng)
    sol = ex.bcd_update(sys)
    assert np.linalg.norm(sys.residual(sol)) < 1e-9
    assert not sys.rank_deficient


def test_bcd_rank_deficient(rng):
    C = rng.normal(size=(8, 3))
    C = np.hstack([C, C[:, :1]])
    sys = ex.BellmanSystem(rng.normal(size=8), sp.csr_matrix(C), 0, 4, 1, 1)
    sol = ex.bcd_update(sys)
    assert sys.rank_deficient and sys.solved_rank == 3
    assert np.all(np.isfinite(sol))


def test_bcd_rejects_non_finite(rng):
    sys, _ = square_system(rng)
    sys.rbar[0] = np.nan
    with pytest.raises(InvalidValueError):
        ex.bcd_update(sys)


@given(seeds)
def test_bcd_decreases_block_loss(seed):
    m, p, f = random_instance(np.random.default_rng(seed))
    for d in range(f.ndim):
        sys = ex.build_bellman_system(m, p, f, d)
        before = sys.value(f.factors[d])
        q = ex.bcd_update(sys, full_rows=f.dims[d])
        assert sys.value(q) <= before + 1e-10
        g = f.copy()
        g.set_factor(d, q)
        assert ex.loss(m, p, g) == pytest.approx(sys.value(q), rel=1e-9, abs=1e-12)


def test_bcgd_stationary_and_zero_step(rng):
    m, p, f = random_instance(rng)
    d = 0
    sys = ex.build_bellman_system(m, p, f, d)
    q = ex.bcd_update(sys, full_rows=f.dims[d])
    assert np.linalg.norm(sys.gradient(q)) < 1e-9
    np.testing.assert_allclose(ex.bcgd_update(sys, q, 0.1), q, atol=1e-9)
    np.testing.assert_array_equal(ex.bcgd_update(sys, f.factors[d], 0.0), f.factors[d])
    with pytest.raises(ValueError):
        ex.bcgd_update(sys, q, -1.0)


@given(seeds)
def test_block_gradient_finite_differences(seed):
    m, p, f = random_instance(np.random.default_rng(seed))
    for d in range(f.ndim):
        sys = ex.build_bellman_system(m, p, f, d)
        g = sys.gradient(f.factors[d]).reshape(sys.n_rows, f.rank)
        fd = fd_gradient(lambda ff: m.horizon * ex.loss(m, p, ff), f, d)[:sys.n_rows]
        scale = max(np.linalg.norm(fd), 1e-8)
        assert np.linalg.norm(g - fd) / scale < 1e-5


def test_max_eigenvalue(rng):
    C = rng.normal(size=(20, 5))
    assert ex.max_eigenvalue(sp.csr_matrix(C)) == pytest.approx(np.linalg.eigvalsh(C.T @ C)[-1], rel=1e-6)
    assert ex.max_eigenvalue(sp.csr_matrix((4, 3))) == 0.0


# ------------------------------------------------------------------ policy evaluation


@pytest.mark.parametrize("rule", [ex.BCD, ex.BCGD])
def test_pe_descent_on_grid(grid_mdp, rule):
    p = random_policy(grid_mdp, 3)
    _, trace = ex.bc_pe(grid_mdp, p, ex.PESettings(rank=25, max_sweeps=15, seed=1), rule)
    losses = [r.loss for r in trace]
    assert np.all(np.diff(losses) <= 1e-10)
    assert losses[-1] < losses[0]


def test_pe_infinite_tolerance_one_sweep(rng):
    m, p, f = random_instance(rng)
    _, trace = ex.bc_pe(m, p, ex.PESettings(rank=f.rank, max_sweeps=10, stop_tol=math.inf), ex.BCD, f)
    assert len(trace) == 2


def test_pe_normalizes_and_pins(rng):
    m, p, f = random_instance(rng)
    g, _ = ex.bc_pe(m, p, ex.PESettings(rank=f.rank, max_sweeps=3), ex.BCD, f)
    assert np.all(g.factors[-1][-1] == 0.0)
    n = g.norms()
    np.testing.assert_allclose(n, n[0], rtol=1e-12)


def test_bcgd_approaches_bcd():
    rng = np.random.default_rng(0)
    m = random_mdp((3,), (2,), 3, rng)
    p = random_policy(m, rng)
    f0 = FactorSet.random(m.tensor_dims, 1, rng, scale=1.0, pinned_time_row=True)
    _, t_bcd = ex.bc_pe(m, p, ex.PESettings(rank=1, max_sweeps=200), ex.BCD, f0)
    _, t_bcgd = ex.bc_pe(m, p, ex.PESettings(rank=1, max_sweeps=1000), ex.BCGD, f0)
    a, b = t_bcd[-1].loss, t_bcgd[-1].loss
    assert b <= a * 1.1 + 1e-8


def test_pe_reference_column(grid_mdp):
    p = random_policy(grid_mdp, 0)
    ref = exact_policy_evaluation(grid_mdp, p)
    _, trace = ex.bc_pe(grid_mdp, p, ex.PESettings(rank=5, max_sweeps=2, seed=0), ex.BCD, reference=ref)
    assert all(0 <= r.nfe for r in trace)
    text = ex.trace_to_csv(trace, timing=False)
    assert text.splitlines()[0] == "sweep,loss,nfe,grad_norm"


def test_full_rank_certificate(grid_mdp):
    p = random_policy(grid_mdp, 0)
    best = math.inf
    for seed in range(3):
        _, trace = ex.bc_pe(grid_mdp, p, ex.PESettings(rank=125, max_sweeps=20, seed=seed), ex.BCD)
        best = min(best, trace[-1].loss)
        if best < 1e-6:
            break
    assert best < 1e-6


def test_stationary_at_fixed_point():
    rng = np.random.default_rng(6)
    m = random_mdp((3,), (2,), 2, rng)
    p = random_policy(m, rng)
    f, trace = ex.bc_pe(m, p, ex.PESettings(rank=2, max_sweeps=5000, stop_tol=1e-22, seed=0), ex.BCD)
    assert len(trace) < 5001
    for d in range(f.ndim):
        sys = ex.build_bellman_system(m, p, f, d)
        assert np.linalg.norm(sys.gradient(f.factors[d])) < 1e-6


# ------------------------------------------------------------------ policy iteration


def test_policy_iteration_exact_oracle(grid_mdp):
    pol, trace, _ = ex.policy_iteration(grid_mdp, ex.exact_evaluator, 0, 20, seed=0)
    assert len(trace) <= 6
    assert policy_return(grid_mdp, pol) == pytest.approx(optimal_return(grid_mdp), abs=1e-12)


def test_policy_iteration_zero_iterations(grid_mdp):
    init = random_policy(grid_mdp, 1)
    pol, trace, _ = ex.policy_iteration(grid_mdp, ex.exact_evaluator, 0, 0, initial=init)
    assert pol.distance(init) == 0 and len(trace) == 0


def test_policy_iteration_fixed_point_residual(rng):
    m = random_mdp((4,), (2,), 3, rng)
    pol, _, _ = ex.policy_iteration(m, ex.exact_evaluator, 0, 50, seed=0)
    q = exact_policy_evaluation(m, pol).values
    qstar = exact_optimal_values(m).values
    assert np.max(np.abs(q - qstar)) < 1e-9


def test_bcd_pi_rank_20(grid_mdp):
    pe = ex.BCPolicyEvaluator(ex.PESettings(rank=20, max_sweeps=10, seed=0), ex.BCD)
    pol, trace, _ = ex.policy_iteration(grid_mdp, pe, 0, 10, seed=0)
    assert policy_return(grid_mdp, pol) == pytest.approx(optimal_return(grid_mdp), abs=1e-9)
    assert len(pe.traces) == len(trace)
    assert "changed" in trace.to_csv(timing=False).splitlines()[0]


def test_warm_start_reuses_factors(grid_mdp):
    pe = ex.BCPolicyEvaluator(ex.PESettings(rank=5, max_sweeps=1, seed=0, warm_start=True), ex.BCD)
    p = random_policy(grid_mdp, 0)
    first = pe(grid_mdp, p)
    pe(grid_mdp, p)
    assert pe.traces[1][0].loss == pytest.approx(ex.loss(grid_mdp, p, first))


# ------------------------------------------------------------------ factor conditioning


def test_condition_monitor(rng):
    f = FactorSet([rng.normal(size=(6, 3)), rng.normal(size=(5, 3))])
    assert not any(c.flagged for c in ex.assumption1_monitor(f))
    q = rng.normal(size=(6, 3))
    q[:, 2] = q[:, 0]
    assert ex.assumption1_monitor(FactorSet([q, rng.normal(size=(5, 3))]))[0].flagged
    wide = ex.assumption1_monitor(FactorSet([rng.normal(size=(2, 3)), rng.normal(size=(5, 3))]))
    assert wide[0].flagged and not wide[1].flagged


def test_normalization_neutral_loss(rng):
    m, p, f = random_instance(rng)
    f.factors[1 % f.ndim] *= 9.0
    assert ex.loss(m, p, normalize_factors(f)) == pytest.approx(ex.loss(m, p, f), abs=1e-10)
