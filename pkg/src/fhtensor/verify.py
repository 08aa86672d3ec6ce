"""Self-check suite behind ``fhtensor verify``.

Each check returns a ``CheckResult`` with the measured quantity and the
tolerance it was held to.  ``run_checks`` accepts a replacement
``bcd_update`` or ``build_bellman_system`` so that a deliberately broken
solver can be shown to fail.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from fhtensor import exact_solver as ex
from fhtensor import stochastic as st
from fhtensor.mdp import Transition, random_mdp, random_policy
from fhtensor.tensor_core import FactorSet, normalize_factors


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    wall_ms: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} measured={self.measured:.3e}  "
                f"tol={self.tolerance:.1e}  ({self.wall_ms:.0f} ms)")


def random_instance(rng, max_states=6, max_actions=3, max_h=4, max_modes=4, max_rank=3):
    """A random small MDP, policy and factor set with at most ``max_modes`` state/action modes."""
    while True:
        n_sd = int(rng.integers(1, max_modes))
        n_ad = int(rng.integers(1, max_modes - n_sd + 1))
        sd = tuple(int(x) for x in rng.integers(1, 4, size=n_sd))
        ad = tuple(int(x) for x in rng.integers(1, 4, size=n_ad))
        if math.prod(sd) <= max_states and math.prod(ad) <= max_actions and math.prod(sd) > 1:
            break
    H = int(rng.integers(1, max_h + 1))
    m = random_mdp(sd, ad, H, rng)
    p = random_policy(m, rng)
    K = int(rng.integers(1, max_rank + 1))
    f = FactorSet.random(m.tensor_dims, K, rng, scale=1.0, pinned_time_row=True)
    return m, p, f


def random_transition(m, f, rng, terminal_prob=0.2) -> Transition:
    h = int(rng.integers(m.horizon))
    s, a = int(rng.integers(m.n_states)), int(rng.integers(m.n_actions))
    s2, a2 = int(rng.integers(m.n_states)), int(rng.integers(m.n_actions))
    if h == m.horizon - 1 or rng.random() < terminal_prob:
        a2 = -1
    return Transition(s, a, float(rng.normal()), s2, a2, h)


def _rel(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(b), np.linalg.norm(a), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def fd_gradient(fun, f: FactorSet, d: int, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``fun(f)`` with respect to ``Q_d``."""
    g = np.zeros_like(f.factors[d])
    rows = f.dims[d] - 1 if f.pinned_time_row and d == f.ndim - 1 else f.dims[d]
    for i in range(rows):
        for k in range(f.rank):
            old = f.factors[d][i, k]
            f.factors[d][i, k] = old + step
            up = fun(f)
            f.factors[d][i, k] = old - step
            down = fun(f)
            f.factors[d][i, k] = old
            g[i, k] = (up - down) / (2 * step)
    return g


# --------------------------------------------------------------------------
# individual checks


def check_loss_identity(rng, n=25, bcd=None) -> float:
    worst = 0.0
    for _ in range(n):
        m, p, f = random_instance(rng)
        L = ex.loss(m, p, f)
        for d in range(f.ndim):
            sys = ex.build_bellman_system(m, p, f, d)
            worst = max(worst, abs(sys.value(f.factors[d]) - L) / L)
    return worst


def check_bcd_stationarity(rng, n=15, bcd=None) -> float:
    """Block gradient norm after an exact block solve, relative to the pre-solve gradient."""
    bcd = bcd or ex.bcd_update
    worst = 0.0
    for _ in range(n):
        m, p, f = random_instance(rng)
        for d in range(f.ndim):
            sys = ex.build_bellman_system(m, p, f, d)
            g0 = np.linalg.norm(sys.gradient(f.factors[d]))
            q = bcd(sys, full_rows=f.dims[d])
            g1 = np.linalg.norm(sys.gradient(q))
            worst = max(worst, g1 / max(g0, np.linalg.norm(sys.rbar), 1e-12))
    return worst


def check_bcd_descent(rng, n=8, sweeps=15, bcd=None) -> float:
    """Largest per-sweep loss increase of BCD policy evaluation."""
    worst = -math.inf
    for _ in range(n):
        m, p, f = random_instance(rng)
        _, trace = ex.bc_pe(m, p, ex.PESettings(rank=f.rank, max_sweeps=sweeps), ex.BCD, f)
        worst = max(worst, float(np.max(np.diff([r.loss for r in trace]))))
    return worst


def check_bcgd_descent(rng, n=8, sweeps=15, bcd=None) -> float:
    worst = -math.inf
    for _ in range(n):
        m, p, f = random_instance(rng)
        _, trace = ex.bc_pe(m, p, ex.PESettings(rank=f.rank, max_sweeps=sweeps), ex.BCGD, f)
        worst = max(worst, float(np.max(np.diff([r.loss for r in trace]))))
    return worst


def check_bcgd_gradient(rng, n=100, bcd=None) -> float:
    worst = 0.0
    for _ in range(n):
        m, p, f = random_instance(rng)
        d = int(rng.integers(f.ndim))
        sys = ex.build_bellman_system(m, p, f, d)
        g = sys.gradient(f.factors[d]).reshape(sys.n_rows, f.rank)
        fd = fd_gradient(lambda ff: m.horizon * ex.loss(m, p, ff), f, d)[:sys.n_rows]
        worst = max(worst, _rel(g, fd))
    return worst


def check_sbcgd_gradient(rng, n=100, bcd=None) -> float:
    worst = 0.0
    for _ in range(n):
        m, p, f = random_instance(rng)
        sigma = random_transition(m, f, rng)
        n_sm = len(m.state_dims)
        d = int(rng.integers(f.ndim))
        g = st.sbcgd_gradient(f, sigma, d, n_sm)
        fd = fd_gradient(lambda ff: st.empirical_bellman_error(ff, sigma, n_sm) ** 2, f, d)
        worst = max(worst, _rel(g, fd))
    return worst


def check_bctd_gradient(rng, n=100, bcd=None) -> float:
    worst = 0.0
    for _ in range(n):
        m, p, f = random_instance(rng)
        sigma = random_transition(m, f, rng)
        n_sm = len(m.state_dims)
        d = int(rng.integers(f.ndim))
        frozen = f.copy()
        g = st.bctd_gradient(f, frozen, sigma, d, n_sm)
        fd = fd_gradient(lambda ff: st.empirical_bellman_error(ff, sigma, n_sm, frozen) ** 2, f, d)
        worst = max(worst, _rel(g, fd))
    return worst


def check_trajectory_equivalence(rng, n=3, bcd=None) -> float:
    worst = 0.0
    for _ in range(n):
        m = random_mdp((3,), (2,), 3, rng)
        p = random_policy(m, rng)
        f = FactorSet.random(m.tensor_dims, 2, rng, scale=1.0, pinned_time_row=True)
        worst = max(worst, abs(st.td_loss_mu(m, p, f) - st.td_loss_xi(m, p, f)))
    return worst


def check_td_unbiased(rng, n=3, bcd=None) -> float:
    worst = 0.0
    for _ in range(n):
        m = random_mdp((3,), (2,), 3, rng)
        p = random_policy(m, rng)
        f = FactorSet.random(m.tensor_dims, 2, rng, scale=1.0, pinned_time_row=True)
        frozen = FactorSet.random(m.tensor_dims, 2, rng, scale=1.0, pinned_time_row=True)
        for d in range(f.ndim):
            a = st.expected_bctd_gradient(m, p, f, frozen, d)
            b = st.td_objective_gradient(m, p, f, frozen, d)
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def check_normalization(rng, n=20, bcd=None) -> float:
    worst = 0.0
    for _ in range(n):
        m, p, f = random_instance(rng)
        f.factors[0] *= 7.0
        worst = max(worst, abs(ex.loss(m, p, normalize_factors(f)) - ex.loss(m, p, f)))
    return worst


def check_kernel_parity(rng, n=200, bcd=None) -> float:
    from fhtensor import kernels

    try:
        ck = kernels.get_backend("cython")
    except ImportError:
        return 0.0
    pk = kernels.get_backend("python")
    dims = np.array([3, 2, 4, 3, 5], dtype=np.int64)
    f = FactorSet.random(tuple(dims), 4, rng, scale=1.0, pinned_time_row=True)
    t1, t2 = f.data.copy(), f.data.copy()
    worst = 0.0
    for i in range(n):
        args = (int(rng.integers(6)), int(rng.integers(12)), int(rng.integers(4)),
                int(rng.integers(6)), int(rng.integers(-1, 12)), float(rng.normal()), 0.01,
                i % 2, (i // 2) % 2)
        e1 = pk.transition_update(t1, f.offsets, dims, 4, 2, *args)
        e2 = ck.transition_update(t2, f.offsets, dims, 4, 2, *args)
        worst = max(worst, abs(e1 - e2), float(np.max(np.abs(t1 - t2))))
    return worst


#: name -> (function, tolerance); a check passes when measured <= tolerance
CHECKS = {
    "loss_system_identity": (check_loss_identity, 1e-10),
    "bcd_block_stationarity": (check_bcd_stationarity, 1e-6),
    "bcd_sweep_descent": (check_bcd_descent, 1e-10),
    "bcgd_sweep_descent": (check_bcgd_descent, 1e-10),
    "bcgd_gradient_fd": (check_bcgd_gradient, 1e-5),
    "sbcgd_gradient_fd": (check_sbcgd_gradient, 1e-5),
    "bctd_gradient_fd": (check_bctd_gradient, 1e-5),
    "trajectory_loss_equivalence": (check_trajectory_equivalence, 1e-12),
    "td_gradient_unbiased": (check_td_unbiased, 1e-12),
    "normalization_neutral": (check_normalization, 1e-10),
    "kernel_parity": (check_kernel_parity, 1e-12),
}


def run_checks(seed: int = 0, bcd_update=None, names=None, build_system=None) -> list:
    """Run the named checks (all by default).

    ``bcd_update`` and ``build_system`` replace the exact block solver and
    the block-system builder for the duration of the run.
    """
    results = []
    originals = (ex.bcd_update, ex.build_bellman_system)
    if bcd_update is not None:
        ex.bcd_update = bcd_update
    if build_system is not None:
        ex.build_bellman_system = build_system
    try:
        for name, (fun, tol) in CHECKS.items():
            if names is not None and name not in names:
                continue
            rng = np.random.default_rng([seed, len(results)])
            t0 = time.perf_counter()
            measured = fun(rng, bcd=bcd_update)
            ms = (time.perf_counter() - t0) * 1e3
            ok = bool(np.isfinite(measured) and measured <= tol)
            results.append(CheckResult(name, ok, float(measured), tol, ms))
    finally:
        ex.bcd_update, ex.build_bellman_system = originals
    return results
