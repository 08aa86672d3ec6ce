"""Model-based low-rank policy evaluation and policy iteration.

The Bellman-error loss of a PARAFAC value model is quadratic in each factor
matrix when the others are held fixed.  ``build_bellman_system`` assembles
that quadratic as ``||rbar + cbar @ q_d||^2`` (``q_d`` is factor ``d``
flattened row-major), and the block-coordinate solvers minimize it exactly
(``bcd_update``) or take a gradient step on it (``bcgd_update``).

Time indices are 0-based: steps ``0 .. H-1`` are free and row ``H`` of the
time factor is the structural zero of the terminal step.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from fhtensor.errors import CapacityError, DegenerateFactorError, InvalidValueError
from fhtensor.mdp import (
    DPTable,
    NonstationaryPolicy,
    TabularMDP,
    exact_policy_evaluation,
    policy_improvement,
    random_policy,
    transition_matrix_under_policy,
)
from fhtensor.tensor_core import (
    FactorSet,
    khatri_rao,
    mode_permutation,
    nfe,
    normalize_inplace,
    reconstruct_entry,
    reconstruct_full,
)

#: Default cap on the dense least-squares matrix (doubles), about 400 MB.
MAX_SYSTEM_ELEMENTS = 50_000_000

BCD = "bcd"
BCGD = "bcgd"


# --------------------------------------------------------------------------
# loss and Bellman error


def q_table(m: TabularMDP, f: FactorSet) -> np.ndarray:
    """Reconstructed values as an ``(H + 1) x |S| x |A|`` array."""
    vals = reconstruct_full(f).values.reshape(m.n_pairs, m.horizon + 1).T
    return vals.reshape(m.horizon + 1, m.n_states, m.n_actions)


def bellman_residuals(m: TabularMDP, p: NonstationaryPolicy, q: np.ndarray) -> np.ndarray:
    """All Bellman errors of the table ``q`` under ``p``, shape ``H x |S| x |A|``.

    The value after the last step is the structural zero regardless of
    what row ``H`` of ``q`` holds.
    """
    H = m.horizon
    states = np.arange(m.n_states)
    out = np.empty((H, m.n_states, m.n_actions))
    for h in range(H):
        r = m.reward_at(h).reshape(m.n_states, m.n_actions)
        if h < H - 1:
            v_next = q[h + 1][states, p.actions[h + 1]]
            r = r + (m.transition @ v_next).reshape(m.n_states, m.n_actions)
        out[h] = r - q[h]
    return out


def bellman_error(m: TabularMDP, p: NonstationaryPolicy, f: FactorSet, s: int, a: int, h: int) -> float:
    """Bellman error of the factor model at one ``(s, a, h)`` triple."""
    idx = np.unravel_index(s, m.state_dims) + np.unravel_index(a, m.action_dims)
    delta = m.reward_value(s, a, h) - reconstruct_entry(f, tuple(idx) + (h,))
    if h < m.horizon - 1:
        succ, prob = m.next_state_dist(s, a)
        for s2, w in zip(succ, prob):
            a2 = int(p.actions[h + 1, s2])
            idx2 = np.unravel_index(s2, m.state_dims) + np.unravel_index(a2, m.action_dims)
            delta += w * reconstruct_entry(f, tuple(idx2) + (h + 1,))
    return float(delta)


def loss(m: TabularMDP, p: NonstationaryPolicy, f) -> float:
    """Mean over time steps of the summed squared Bellman errors.

    ``f`` may be a ``FactorSet`` or a value table of shape ``(H+1, |S|, |A|)``.
    """
    q = q_table(m, f) if isinstance(f, FactorSet) else np.asarray(f.values if isinstance(f, DPTable) else f)
    res = bellman_residuals(m, p, q)
    return float(np.sum(res * res) / m.horizon)


# --------------------------------------------------------------------------
# vectorized system


def build_reward_vector(m: TabularMDP) -> np.ndarray:
    """Per-step reward vectors stacked over ``h = 0 .. H-1``."""
    return np.concatenate([m.reward_at(h) for h in range(m.horizon)])


def _time_mode(f: FactorSet) -> int:
    return f.ndim - 1


def build_coefficient_block(m: TabularMDP, p: NonstationaryPolicy, f: FactorSet, d: int, h: int) -> sp.csr_matrix:
    """Sparse ``|S||A| x dims[d]*K`` matrix mapping ``vec(Q_d)`` to the slice ``Q(:, :, h)``.

    ``h`` ranges over ``0 .. H``; for a non-time mode the block at ``h = H``
    is built from the zero terminal row and is therefore empty.
    """
    H = m.horizon
    if not 0 <= h <= H:
        raise IndexError(f"time step {h} out of range 0..{H}")
    K = f.rank
    N = m.n_pairs
    T = _time_mode(f)
    sa_dims = f.dims[:T]
    if d == T:
        W = khatri_rao(f.factors[:T]) if T else np.ones((1, K))
        cols = h * K + np.arange(K)
        rows_cols = np.broadcast_to(cols, (N, K))
        return sp.csr_matrix((W.ravel(), rows_cols.ravel(), np.arange(0, N * K + 1, K)),
                             shape=(N, f.dims[d] * K))
    if not 0 <= d < T:
        raise IndexError(f"mode {d} out of range")
    if h == H:
        return sp.csr_matrix((N, f.dims[d] * K))
    R = N // f.dims[d]
    perm = mode_permutation(sa_dims, d)
    others = [f.factors[j] for j in range(T) if j != d]
    W = khatri_rao(others) if others else np.ones((1, K))
    W = W * f.factors[T][h]
    data = W[perm % R]
    cols = (perm // R)[:, None] * K + np.arange(K)
    return sp.csr_matrix((data.ravel(), cols.ravel(), np.arange(0, N * K + 1, K)),
                         shape=(N, f.dims[d] * K))


@dataclass
class BellmanSystem:
    """The least-squares subproblem ``min_q ||rbar + cbar q||^2`` for factor ``mode``.

    For the time mode only the ``H`` free rows are unknowns, so ``cbar`` has
    ``H*K`` columns there and ``dims[mode]*K`` otherwise.
    """

    rbar: np.ndarray
    cbar: sp.csr_matrix
    mode: int
    n_rows: int
    rank: int
    horizon: int
    rank_deficient: bool = False
    solved_rank: int | None = None

    def residual(self, q: np.ndarray) -> np.ndarray:
        return self.rbar + self.cbar @ self.vec(q)

    def vec(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return q[:self.n_rows].ravel() if q.ndim == 2 else q

    def value(self, q: np.ndarray) -> float:
        """The loss ``(1/H) ||rbar + cbar q||^2``."""
        r = self.residual(q)
        return float(r @ r / self.horizon)

    def gradient(self, q: np.ndarray) -> np.ndarray:
        """``2 cbar^T (rbar + cbar q)``, as a flat vector."""
        return 2.0 * (self.cbar.T @ self.residual(q))


def system_size(m: TabularMDP, f: FactorSet, d: int) -> int:
    """Number of doubles in the dense form of the mode-``d`` system."""
    rows = f.dims[d] - 1 if d == _time_mode(f) else f.dims[d]
    return m.n_pairs * m.horizon * rows * f.rank


def build_bellman_system(m: TabularMDP, p: NonstationaryPolicy, f: FactorSet, d: int) -> BellmanSystem:
    """Stack ``P_{h+1} C^{h+1} - C^h`` over ``h = 0 .. H-1``.

    ``P_{h+1}`` moves pair values one step ahead under ``pi_{h+1}``; at the
    last step the successor block is the structural zero.
    """
    H = m.horizon
    T = _time_mode(f)
    n_rows = f.dims[d] - 1 if d == T else f.dims[d]
    ncols = n_rows * f.rank
    blocks = [build_coefficient_block(m, p, f, d, h)[:, :ncols] for h in range(H)]
    stacked = []
    for h in range(H):
        blk = -blocks[h]
        if h < H - 1:
            blk = transition_matrix_under_policy(m, p, h + 1) @ blocks[h + 1] + blk
        stacked.append(blk)
    cbar = sp.vstack(stacked, format="csr")
    return BellmanSystem(build_reward_vector(m), cbar, d, n_rows, f.rank, H)


def _unvec(sys: BellmanSystem, q: np.ndarray, full_rows: int) -> np.ndarray:
    out = np.zeros((full_rows, sys.rank))
    out[:sys.n_rows] = q.reshape(sys.n_rows, sys.rank)
    return out


def bcd_update(sys: BellmanSystem, full_rows: int | None = None) -> np.ndarray:
    """Exact minimizer of the block subproblem (minimum-norm if rank deficient).

    Uses a complete orthogonal factorization with column pivoting.  Sets
    ``sys.rank_deficient`` and ``sys.solved_rank``.  ``full_rows`` pads the
    result back to the factor's row count (time mode).
    """
    if full_rows is None:
        full_rows = sys.n_rows
    C = sys.cbar.toarray() if sp.issparse(sys.cbar) else np.asarray(sys.cbar)
    if not (np.all(np.isfinite(C)) and np.all(np.isfinite(sys.rbar))):
        raise InvalidValueError("non-finite entries in the Bellman system")
    q, _, rank, _ = scipy.linalg.lstsq(C, -sys.rbar, lapack_driver="gelsy", check_finite=False)
    sys.solved_rank = int(rank)
    sys.rank_deficient = rank < C.shape[1]
    return _unvec(sys, q, full_rows)


def bcgd_update(sys: BellmanSystem, q_prev: np.ndarray, alpha: float) -> np.ndarray:
    """One gradient step ``q - 2 alpha cbar^T (rbar + cbar q)`` on the block."""
    if alpha < 0:
        raise ValueError("step size must be nonnegative")
    q_prev = np.asarray(q_prev, dtype=float)
    q = sys.vec(q_prev) - alpha * sys.gradient(q_prev)
    return _unvec(sys, q, q_prev.shape[0])


def max_eigenvalue(cbar, iters: int = 200, tol: float = 1e-8, seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of ``cbar^T cbar``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(cbar.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = cbar.T @ (cbar @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(nrm - lam) <= tol * nrm:
            return float(nrm)
        lam = nrm
    return float(lam)


# --------------------------------------------------------------------------
# policy evaluation loop


@dataclass
class PESettings:
    rank: int = 10
    max_sweeps: int = 10
    stop_tol: float = 0.0
    step_size: float | None = None  # None: 0.4 / lambda_max, re-estimated per mode and sweep
    seed: int | None = None
    init_scale: float | None = None
    warm_start: bool = False
    memory_cap: int = MAX_SYSTEM_ELEMENTS

    def __post_init__(self):
        if self.rank < 1 or self.max_sweeps < 1:
            raise ValueError("rank and max_sweeps must be >= 1")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be >= 0")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")


@dataclass
class SweepRecord:
    sweep: int
    mode_sweep_time_ms: float
    loss: float
    nfe: float
    grad_norm: float
    rank_deficient: bool = False


TRACE_COLUMNS = ("sweep", "mode_sweep_time_ms", "loss", "nfe", "grad_norm")


def trace_to_csv(trace, timing: bool = True) -> str:
    cols = [c for c in TRACE_COLUMNS if timing or c != "mode_sweep_time_ms"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in trace:
        w.writerow([_fmt(getattr(rec, c)) for c in cols])
    return buf.getvalue()


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else str(x)


def check_capacity(m: TabularMDP, f: FactorSet, cap: int):
    for d in range(f.ndim):
        n = system_size(m, f, d)
        if n > cap:
            raise CapacityError(f"mode {d} system needs {n} doubles (cap {cap})", requested=n)


def bc_pe(m: TabularMDP, p: NonstationaryPolicy, settings: PESettings, rule: str = BCD,
          f0: FactorSet | None = None, reference=None):
    """Block-coordinate policy evaluation.

    Each sweep updates the modes in order (every update sees the factors
    already updated in this sweep), normalizes, and stops early once the
    squared factor change falls to ``settings.stop_tol``.  ``reference``
    (a ``DPTable`` or dense tensor) adds an NFE column to the trace; the
    first trace row describes the initial factors.  ``grad_norm`` is the
    norm of the block gradients seen at the start of each block update.
    """
    if rule not in (BCD, BCGD):
        raise ValueError(f"unknown rule {rule!r}")
    if f0 is None:
        f = FactorSet.random(m.tensor_dims, settings.rank, rng=settings.seed,
                             scale=settings.init_scale, pinned_time_row=True)
    else:
        if f0.dims != m.tensor_dims:
            raise ValueError(f"factor dims {f0.dims} do not match {m.tensor_dims}")
        f = f0.copy()
        f.pinned_time_row = True
        f.factors[-1][-1] = 0.0
    check_capacity(m, f, settings.memory_cap)
    ref = None
    if reference is not None:
        ref = reference.to_tensor(m) if isinstance(reference, DPTable) else reference

    def measure():
        return float(nfe(reconstruct_full(f), ref)) if ref is not None else math.nan

    trace = [SweepRecord(0, 0.0, loss(m, p, f), measure(), math.nan)]
    for sweep in range(1, settings.max_sweeps + 1):
        t0 = time.perf_counter()
        prev = [q.copy() for q in f.factors]
        g2 = 0.0
        deficient = False
        for d in range(f.ndim):
            sys = build_bellman_system(m, p, f, d)
            grad = sys.gradient(f.factors[d])
            g2 += float(grad @ grad)
            if rule == BCD:
                new = bcd_update(sys, full_rows=f.dims[d])
                deficient |= sys.rank_deficient
            else:
                alpha = settings.step_size
                if alpha is None:
                    lam = max_eigenvalue(sys.cbar)
                    alpha = 0.4 / lam if lam > 0 else 0.0
                new = bcgd_update(sys, f.factors[d], alpha)
            f.set_factor(d, new)
        try:
            normalize_inplace(f)
        except DegenerateFactorError as exc:
            exc.trace = trace
            raise
        elapsed = (time.perf_counter() - t0) * 1e3
        trace.append(SweepRecord(sweep, elapsed, loss(m, p, f), measure(), math.sqrt(g2), deficient))
        change = sum(float(np.sum((a - b) ** 2)) for a, b in zip(f.factors, prev))
        if change <= settings.stop_tol:
            break
    return f, trace


class BCPolicyEvaluator:
    """Policy-evaluation callable for ``policy_iteration`` built on ``bc_pe``.

    Factors are freshly initialized for every call from an internal
    generator seeded by ``settings.seed``, unless ``settings.warm_start``
    is set, in which case the previous result seeds the next call.
    """

    def __init__(self, settings: PESettings, rule: str = BCD):
        self.settings = settings
        self.rule = rule
        self.rng = np.random.default_rng(settings.seed)
        self.last = None
        self.traces = []

    def __call__(self, m: TabularMDP, p: NonstationaryPolicy) -> FactorSet:
        f0 = None
        if self.settings.warm_start and self.last is not None:
            f0 = self.last
        else:
            f0 = FactorSet.random(m.tensor_dims, self.settings.rank, rng=self.rng,
                                  scale=self.settings.init_scale, pinned_time_row=True)
        f, trace = bc_pe(m, p, self.settings, self.rule, f0)
        self.last = f
        self.traces.append(trace)
        return f


def exact_evaluator(m: TabularMDP, p: NonstationaryPolicy) -> DPTable:
    return exact_policy_evaluation(m, p)


# --------------------------------------------------------------------------
# policy iteration


@dataclass
class PIRecord:
    iteration: int
    loss: float
    nfe: float
    changed: int
    wall_ms: float
    policy: NonstationaryPolicy = field(repr=False)


@dataclass
class PITrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_csv(self, timing: bool = True) -> str:
        cols = ["iteration", "loss", "nfe", "changed"] + (["wall_ms"] if timing else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for rec in self.records:
            w.writerow([_fmt(getattr(rec, c)) for c in cols])
        return buf.getvalue()


def _as_table(m: TabularMDP, q) -> np.ndarray:
    if isinstance(q, FactorSet):
        return q_table(m, q)
    if isinstance(q, DPTable):
        return q.values
    return np.asarray(q, dtype=float)


def policy_iteration(m: TabularMDP, pe: Callable, eps1: int = 0, max_iters: int = 10,
                     initial: NonstationaryPolicy | None = None, seed=None,
                     reference: DPTable | None = None):
    """Alternate policy evaluation ``pe(m, policy)`` and greedy improvement.

    ``pe`` may return a ``FactorSet``, a ``DPTable`` or a raw value table.
    Stops when the number of changed policy entries is at most ``eps1`` or
    after ``max_iters`` evaluations.  Each trace record describes the
    evaluation of the policy it stores, with NFE against ``reference``.
    Returns ``(policy, trace, last_values)``.
    """
    p = initial.copy() if initial is not None else random_policy(m, seed)
    p.validate(m)
    trace = PITrace()
    values = None
    ref = reference.values if reference is not None else None
    for n in range(1, max_iters + 1):
        t0 = time.perf_counter()
        values = _as_table(m, pe(m, p))
        new = policy_improvement(values[:m.horizon])
        changed = p.distance(new)
        err = math.nan
        if ref is not None:
            err = float(np.linalg.norm(values - ref) / np.linalg.norm(ref))
        trace.records.append(PIRecord(n, loss(m, p, values), err, changed,
                                      (time.perf_counter() - t0) * 1e3, p))
        p = new
        if changed <= eps1:
            break
    return p, trace, values


# --------------------------------------------------------------------------
# assumption monitoring


@dataclass
class ModeCondition:
    mode: int
    sigma_min: float
    sigma_max: float
    condition: float
    flagged: bool


def assumption1_monitor(f: FactorSet, rel_tol: float = 1e-10) -> list:
    """Column-rank report for every factor matrix.

    A factor is flagged when its smallest singular value (counting ``K``
    of them, so fewer rows than columns always flags) is below
    ``rel_tol`` times the largest.
    """
    out = []
    for d, q in enumerate(f.factors):
        sv = np.linalg.svd(q, compute_uv=False)
        smax = float(sv[0]) if sv.size else 0.0
        smin = float(sv[-1]) if sv.size == f.rank else 0.0
        cond = smax / smin if smin > 0 else math.inf
        out.append(ModeCondition(d, smin, smax, cond, smin < rel_tol * smax or smax == 0.0))
    return out
