"""One test per acceptance criterion, each at its stated tolerance.

Every test records a PASS/FAIL line through the ``verdict`` fixture; the
lines are collected and printed in the terminal summary.
"""
import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from fhtensor import cli
from fhtensor import exact_solver as ex
from fhtensor import stochastic as st
from fhtensor.environments import make_env
from fhtensor.errors import DivergenceError
from fhtensor.mdp import (Transition, exact_optimal_values, optimal_return, policy_return, random_mdp, random_policy, sample_trajectory)
from fhtensor.tensor_core import FactorSet
from fhtensor.verify import (check_bcgd_gradient, check_bctd_gradient, check_loss_identity,
                             check_sbcgd_gradient, random_instance)


def test_loss_matches_block_system(verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = check_loss_identity(rng, n=25)
    secs = time.perf_counter() - t0
    ok = worst < 1e-10 and secs < 10
    verdict(1, f"loss vs block-system identity, worst rel {worst:.2e} (< 1e-10), {secs:.1f}s (< 10s)", ok)
    assert ok


def test_gradients_match_finite_differences(verdict):
    t0 = time.perf_counter()
    worst = {name: fun(np.random.default_rng(seed), n=100)
             for seed, (name, fun) in enumerate([("exact block", check_bcgd_gradient),
                                                 ("sampled residual", check_sbcgd_gradient),
                                                 ("td", check_bctd_gradient)])}
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and secs < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, f"gradients vs central differences ({detail}; < 1e-5), {secs:.1f}s (< 30s)", ok)
    assert ok


def test_trajectory_and_transition_losses(verdict):
    rng = np.random.default_rng(303)
    gaps = []
    cases = []
    for _ in range(3):
        m = random_mdp((3,), (2,), 3, rng)
        p = random_policy(m, rng)
        f = FactorSet.random(m.tensor_dims, 2, rng, scale=1.0, pinned_time_row=True)
        gaps.append(abs(st.td_loss_mu(m, p, f) - st.td_loss_xi(m, p, f)))
        cases.append((m, p, f))
    m, p, f = cases[0]
    n = 100_000
    per_episode = np.empty(n)
    for i in range(n):
        per_episode[i] = sum(st.empirical_bellman_error(f, t, 1) ** 2 for t in sample_trajectory(m, p, rng))
    per_episode /= m.horizon
    se = per_episode.std(ddof=1) / math.sqrt(n)
    z = abs(per_episode.mean() - st.td_loss_xi(m, p, f)) / se
    ok = max(gaps) < 1e-12 and z < 3
    verdict(3, f"episode vs transition loss, enumeration gap {max(gaps):.1e} (< 1e-12), "
               f"Monte Carlo |z| {z:.2f} (< 3)", ok)
    assert ok


def test_block_descent_on_gridworld(verdict, grid_mdp):
    worst = -math.inf
    for rule in (ex.BCD, ex.BCGD):
        for K in (5, 15, 25):
            for seed in range(5):
                p = random_policy(grid_mdp, [seed, 1])
                _, trace = ex.bc_pe(grid_mdp, p, ex.PESettings(rank=K, max_sweeps=50, seed=seed), rule)
                losses = [r.loss for r in trace]
                assert len(losses) == 51
                worst = max(worst, float(np.max(np.diff(losses))))
    ok = worst <= 1e-10
    verdict(4, f"per-sweep loss change over 50 sweeps, both rules, 5 seeds, K in 5/15/25: "
               f"max {worst:.2e} (<= 1e-10)", ok)
    assert ok


def test_rank_sweep(verdict, tmp_path, capsys):
    t0 = time.perf_counter()
    code = cli.main(["rank-sweep", "--env", "gridworld", "--ranks", "1,5,10,15,20,25,40,125",
                     "--seed", "0", "--out", str(tmp_path)])
    secs = time.perf_counter() - t0
    out = capsys.readouterr().out.strip().splitlines()[-1]
    rows = {int(r["rank"]): float(r["nfe"]) for r in cli.read_csv(f"{out}/seed-0.csv")}
    seq = [rows[K] for K in sorted(rows)]
    monotone = all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))
    ok = code == 0 and rows[125] < 1e-6 and rows[20] < 0.05 and monotone and secs < 120
    verdict(5, f"rank sweep NFE K=125 {rows[125]:.1e} (< 1e-6), K=20 {rows[20]:.3f} (< 0.05), "
               f"non-increasing {monotone}, {secs:.0f}s (< 120s)", ok)
    assert ok


def test_policy_iteration_recovers_optimum(verdict, grid_mdp):
    qstar = exact_optimal_values(grid_mdp)
    opt = optimal_return(grid_mdp)
    results = {}
    for K in (25, 15):
        pe = ex.BCPolicyEvaluator(ex.PESettings(rank=K, max_sweeps=10, seed=0), ex.BCD)
        pol, trace, _ = ex.policy_iteration(grid_mdp, pe, 0, 10, seed=0, reference=qstar)
        results[K] = (policy_return(grid_mdp, pol), len(trace), trace.records[-1].nfe)
    r25, n25, _ = results[25]
    r15, n15, e15 = results[15]
    ok = abs(r25 - opt) <= 1e-9 and n25 <= 10 and abs(r15 - opt) <= 1e-9 and 0.15 <= e15 <= 0.45
    verdict(6, f"block-descent policy iteration: K=25 return gap {abs(r25 - opt):.1e} in {n25} iterations, "
               f"K=15 gap {abs(r15 - opt):.1e} with NFE {e15:.3f} (in [0.15, 0.45])", ok)
    assert ok


def _grid_learning(rule, seeds=10):
    env = make_env("gridworld", "paper")
    finals = []
    for seed in range(seeds):
        settings = st.StochSettings(episodes=50_000, rank=25, alpha0=0.03, init_scale=0.5, scaled_step=True,
                                    seed=seed, eval_interval=5_000)
        try:
            _, curve, _ = st.online_pi(env, settings, rule)
            finals.append(curve.final_return)
        except DivergenceError:
            finals.append(-math.inf)
    return float(np.mean(finals)) / optimal_return(env.model)


#: per-environment learning settings for the factored learner and the tabular baseline
LEARNING = {
    "wireless": dict(rank=20, alpha0=0.01, alpha_half=None),
    "battery": dict(rank=40, alpha0=0.02, alpha_half=2e4),
}


def _small_preset_learning(name, seeds=3, episodes=100_000):
    env = make_env(name, "small")
    opt = optimal_return(env.model)
    target = opt - 0.05 * abs(opt)
    common = dict(episodes=episodes, eval_interval=episodes // 20, init_scale=1.0, scaled_step=True)
    ours, base = [], []
    for seed in range(seeds):
        try:
            _, c, _ = st.online_pi(env, st.StochSettings(seed=seed, **common, **LEARNING[name]), st.BCTD)
        except DivergenceError:
            c = st.LearningCurve(0, eval_return=[-math.inf], eval_transitions=[math.inf])
        ours.append(c)
        _, b = st.fhql(env, st.StochSettings(seed=seed, episodes=episodes, eval_interval=episodes // 20,
                                             alpha0=0.3, alpha_half=None))
        base.append(b)
    final = float(np.mean([c.final_return for c in ours]))
    reach = float(np.mean([c.transitions_to_reach(target) for c in ours]))
    reach_base = float(np.mean([b.transitions_to_reach(target) for b in base]))
    params = max(c.param_count for c in ours) / env.tabular_size
    final_base = float(np.mean([b.final_return for b in base]))
    return opt, final, reach, reach_base, params, final_base


def test_stochastic_learning(verdict):
    t0 = time.perf_counter()
    grid = {rule: _grid_learning(rule) for rule in (st.BCTD, st.SBCGD)}
    small = {name: _small_preset_learning(name) for name in LEARNING}
    secs = time.perf_counter() - t0
    grid_ok = min(grid.values()) >= 0.98
    parts = [f"gridworld td {grid[st.BCTD]:.1%}, sampled-residual {grid[st.SBCGD]:.1%} of optimum (>= 98%)"]
    small_ok = True
    for name, (opt, final, reach, reach_base, params, final_base) in small.items():
        within = final >= opt - 0.05 * abs(opt)
        faster = math.isfinite(reach) and reach < reach_base
        small_ok &= within and faster and params < 0.10
        parts.append(f"{name} final {final:.3f} vs optimum {opt:.3f} (within 5%: {within}; tabular final {final_base:.3f}), "
                     f"transitions {reach:.3g} vs tabular {reach_base:.3g}, params {params:.1%} (< 10%)")
    ok = grid_ok and small_ok and secs < 900
    verdict(7, "; ".join(parts) + f"; {secs:.0f}s (< 900s)", ok)
    assert ok


def test_td_gradient_unbiased_and_squared_error_biased(verdict):
    rng = np.random.default_rng(808)
    m = random_mdp((3,), (2,), 3, rng)
    p = random_policy(m, rng)
    f = FactorSet.random(m.tensor_dims, 2, rng, scale=1.0, pinned_time_row=True)
    frozen = FactorSet.random(m.tensor_dims, 2, rng, scale=1.0, pinned_time_row=True)
    gap = max(float(np.max(np.abs(st.expected_bctd_gradient(m, p, f, frozen, d)
                                  - st.td_objective_gradient(m, p, f, frozen, d)))) for d in range(f.ndim))

    # sampled TD gradients average to the exact one (family-wise 3-sigma bound over all entries)
    table = st.xi_distribution(m, p)
    trans = list(table.transitions())
    n = 50_000
    draws = rng.choice(len(trans), size=n, p=table.prob / table.prob.sum())
    d = 0
    grads = np.array([st.bctd_gradient(f, frozen, trans[i], d, 1).ravel() for i in draws])
    exact = st.td_objective_gradient(m, p, f, frozen, d).ravel()
    se = grads.std(axis=0, ddof=1) / math.sqrt(n)
    live = se > 0
    z = float(np.max(np.abs(grads.mean(axis=0)[live] - exact[live]) / se[live]))
    zmax = float(norm.ppf(1 - 0.0027 / (2 * live.sum())))

    # squared sampled residual overestimates the squared exact residual
    s, h = 1, 0
    a = int(p.actions[h, s])
    exact_err = ex.bellman_error(m, p, f, s, a, h)
    succ, prob = m.next_state_dist(s, a)
    nexts = rng.choice(succ, size=100_000, p=prob)
    sq = np.array([st.empirical_bellman_error(f, Transition(s, a, m.reward_value(s, a, h), int(s2),
                                                            int(p.actions[h + 1, s2]), h), 1) ** 2
                   for s2 in nexts])
    margin = sq.mean() - exact_err ** 2
    margin_se = sq.std(ddof=1) / math.sqrt(sq.size)
    ok = gap < 1e-12 and z < zmax and margin > 3 * margin_se
    verdict(8, f"td gradient enumeration gap {gap:.1e} (< 1e-12), Monte Carlo max |z| {z:.2f} (< {zmax:.2f}); "
               f"squared-error bias {margin:.4f} = {margin / margin_se:.1f} SE (> 3)", ok)
    assert ok


DETERMINISM_COMMANDS = [
    ["rank-sweep", "--env", "gridworld", "--ranks", "1,5,20"],
    ["exact", "--env", "gridworld", "--algo", "DP"],
    ["exact", "--env", "gridworld", "--algo", "BCD-PI", "--ranks", "10", "--set", "pi_iters=3"],
    ["exact", "--env", "gridworld", "--algo", "BCGD-PI", "--ranks", "10", "--set", "pi_iters=3"],
] + [["stochastic", "--env", env, "--algo", algo, "--ranks", "5", "--set", "episodes=200"]
     for env in ("gridworld", "battery") for algo in cli.STOCH_ALGOS]


def test_cli_determinism(verdict, tmp_path, capsys):
    def outputs(root, argv):
        assert cli.main(argv + ["--seeds", "0,1", "--out", str(root)]) == 0
        out = capsys.readouterr().out.strip().splitlines()[-1]
        return {p.name: p.read_bytes() for p in sorted((root / out.split(str(root) + "/")[1]).glob("*.csv"))}

    bad = []
    for i, argv in enumerate(DETERMINISM_COMMANDS):
        a = outputs(tmp_path / f"{i}a", argv)
        b = outputs(tmp_path / f"{i}b", argv)
        if not a or a != b:
            bad.append(" ".join(argv[:4]))
    dec = []
    for tag in "ab":
        path = tmp_path / f"dec-{tag}.json"
        cli.main(["decompose", "gridworld", "--rank", "4", "--seed", "3", "--out", str(path)])
        dec.append(path.read_bytes())
    if dec[0] != dec[1]:
        bad.append("decompose")
    ok = not bad
    verdict(9, f"{len(DETERMINISM_COMMANDS) + 1} commands rerun byte-identical"
               + (f"; differing: {', '.join(bad)}" if bad else ""), ok)
    assert ok
