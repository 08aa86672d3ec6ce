"""Model-free learning of PARAFAC value models from sampled transitions.

Two per-transition rules are provided.  ``SBCGD`` descends the squared
empirical Bellman error in both of its value terms.  ``BCTD`` holds the
bootstrap term fixed at the factors seen before the update, which makes
the expected step the gradient of the exact TD objective.  The hot loop
lives in ``fhtensor.kernels``.

The module also holds the tabular and linear baselines used in the
benchmarks and the enumeration oracles for the transition distribution.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from fhtensor import kernels
from fhtensor.errors import CapacityError, DivergenceError
from fhtensor.exact_solver import build_coefficient_block, q_table
from fhtensor.mdp import (
    TERMINAL,
    NonstationaryPolicy,
    TabularMDP,
    Transition,
    policy_improvement,
    policy_return,
    state_distributions,
    uniform_policy_return,
)
from fhtensor.tensor_core import FactorSet, reconstruct_entry

SBCGD = "sbcgd"
BCTD = "bctd"
RULE_CODES = {SBCGD: kernels.SBCGD, BCTD: kernels.BCTD}

#: Largest transition table / trajectory set the enumeration oracles build.
MAX_ENUMERATION = 5_000_000
#: Largest tabular Q-table the baselines will allocate.
MAX_TABLE_ENTRIES = 50_000_000


# --------------------------------------------------------------------------
# single-transition quantities


def _index(f: FactorSet, n_state_modes: int, s: int, a: int, h: int) -> tuple:
    sd = f.dims[:n_state_modes]
    ad = f.dims[n_state_modes:-1]
    return tuple(np.unravel_index(s, sd)) + tuple(np.unravel_index(a, ad)) + (h,)


def _is_terminal(f: FactorSet, sigma: Transition) -> bool:
    return sigma.a_next < 0 or sigma.h + 1 >= f.dims[-1] - 1


def empirical_bellman_error(f: FactorSet, sigma: Transition, n_state_modes: int,
                            frozen: FactorSet | None = None) -> float:
    """``r + Q(s', a', h+1) - Q(s, a, h)``; the bootstrap uses ``frozen`` when given.

    A terminal transition (``a_next < 0`` or the last step) bootstraps from
    the structural zero.
    """
    boot = 0.0
    if not _is_terminal(f, sigma):
        src = frozen if frozen is not None else f
        boot = reconstruct_entry(src, _index(f, n_state_modes, sigma.s_next, sigma.a_next, sigma.h + 1))
    return float(sigma.r + boot - reconstruct_entry(f, _index(f, n_state_modes, sigma.s, sigma.a, sigma.h)))


def _row_product(f: FactorSet, idx: tuple, d: int) -> np.ndarray:
    p = np.ones(f.rank)
    for j, i in enumerate(idx):
        if j != d:
            p *= f.factors[j][i]
    return p


def sbcgd_gradient(f: FactorSet, sigma: Transition, d: int, n_state_modes: int) -> np.ndarray:
    """Gradient of the squared empirical Bellman error with respect to ``Q_d``."""
    delta = empirical_bellman_error(f, sigma, n_state_modes)
    g = np.zeros_like(f.factors[d])
    idx = _index(f, n_state_modes, sigma.s, sigma.a, sigma.h)
    g[idx[d]] -= 2.0 * delta * _row_product(f, idx, d)
    if not _is_terminal(f, sigma):
        idx2 = _index(f, n_state_modes, sigma.s_next, sigma.a_next, sigma.h + 1)
        g[idx2[d]] += 2.0 * delta * _row_product(f, idx2, d)
    return g


def bctd_gradient(f: FactorSet, frozen: FactorSet, sigma: Transition, d: int, n_state_modes: int) -> np.ndarray:
    """TD direction for ``Q_d``: the bootstrap value comes from ``frozen`` and is not differentiated."""
    delta = empirical_bellman_error(f, sigma, n_state_modes, frozen=frozen)
    g = np.zeros_like(f.factors[d])
    idx = _index(f, n_state_modes, sigma.s, sigma.a, sigma.h)
    g[idx[d]] = -2.0 * delta * _row_product(f, idx, d)
    return g


# --------------------------------------------------------------------------
# transition and trajectory distributions


@dataclass
class TransitionTable:
    """Enumerated transitions with their probabilities under a policy."""

    h: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray
    prob: np.ndarray

    def __len__(self):
        return self.prob.size

    def transitions(self):
        for i in range(len(self)):
            yield Transition(int(self.s[i]), int(self.a[i]), float(self.r[i]),
                             int(self.s_next[i]), int(self.a_next[i]), int(self.h[i]))


def xi_distribution(m: TabularMDP, p: NonstationaryPolicy, cap: int = MAX_ENUMERATION) -> TransitionTable:
    """Distribution of a single transition drawn by picking a uniform step of an episode.

    The probability of ``(h, s, a, s', a')`` is ``P_h(s) P(s'|s,a) / H`` with
    ``a = pi_h(s)``, ``a' = pi_{h+1}(s')`` and state marginals propagated
    from the initial distribution; zero-probability transitions are dropped.
    """
    H = m.horizon
    nnz = m.transition.nnz
    if H * nnz > cap:
        raise CapacityError(f"transition table would have up to {H * nnz} rows", requested=H * nnz)
    marg = state_distributions(m, p)
    P = m.transition
    cols = {k: [] for k in ("h", "s", "a", "r", "s_next", "a_next", "prob")}
    for h in range(H):
        for s in np.flatnonzero(marg[h] > 0):
            a = int(p.actions[h, s])
            i = s * m.n_actions + a
            lo, hi = P.indptr[i], P.indptr[i + 1]
            succ = P.indices[lo:hi]
            n = succ.size
            cols["h"].append(np.full(n, h))
            cols["s"].append(np.full(n, s))
            cols["a"].append(np.full(n, a))
            cols["r"].append(np.full(n, m.reward_value(s, a, h)))
            cols["s_next"].append(succ)
            cols["a_next"].append(p.actions[h + 1, succ] if h < H - 1 else np.full(n, TERMINAL))
            cols["prob"].append(marg[h, s] * P.data[lo:hi] / H)
    return TransitionTable(*(np.concatenate(cols[k]) for k in ("h", "s", "a", "r", "s_next", "a_next", "prob")))


def enumerate_trajectories(m: TabularMDP, p: NonstationaryPolicy, cap: int = MAX_ENUMERATION):
    """All positive-probability episodes under ``p`` as ``(probability, [Transition...])``."""
    H = m.horizon
    out = []
    frontier = [(float(w), s, []) for s, w in enumerate(m.initial_dist) if w > 0]
    for h in range(H):
        nxt = []
        for prob, s, path in frontier:
            a = int(p.actions[h, s])
            succ, ps = m.next_state_dist(s, a)
            r = m.reward_value(s, a, h)
            for s2, w in zip(succ, ps):
                a2 = int(p.actions[h + 1, s2]) if h < H - 1 else TERMINAL
                nxt.append((prob * w, int(s2), path + [Transition(s, a, r, int(s2), a2, h)]))
        if len(nxt) > cap:
            raise CapacityError(f"more than {cap} trajectories", requested=len(nxt))
        frontier = nxt
    out = [(prob, path) for prob, _, path in frontier]
    return out


def td_loss_xi(m: TabularMDP, p: NonstationaryPolicy, f: FactorSet, frozen: FactorSet | None = None) -> float:
    """Expected squared empirical Bellman error under the transition distribution."""
    table = xi_distribution(m, p)
    n_sm = len(m.state_dims)
    return float(sum(w * empirical_bellman_error(f, t, n_sm, frozen) ** 2
                     for w, t in zip(table.prob, table.transitions())))


def td_loss_mu(m: TabularMDP, p: NonstationaryPolicy, f: FactorSet) -> float:
    """Expected per-step mean squared empirical Bellman error over whole episodes."""
    n_sm = len(m.state_dims)
    total = 0.0
    for prob, path in enumerate_trajectories(m, p):
        total += prob * sum(empirical_bellman_error(f, t, n_sm) ** 2 for t in path) / m.horizon
    return float(total)


def expected_bctd_gradient(m: TabularMDP, p: NonstationaryPolicy, f: FactorSet, frozen: FactorSet, d: int) -> np.ndarray:
    """``sum_sigma xi(sigma) * bctd_gradient(sigma)`` by enumeration."""
    n_sm = len(m.state_dims)
    table = xi_distribution(m, p)
    g = np.zeros_like(f.factors[d])
    for w, t in zip(table.prob, table.transitions()):
        g += w * bctd_gradient(f, frozen, t, d, n_sm)
    return g


def td_objective_gradient(m: TabularMDP, p: NonstationaryPolicy, f: FactorSet, frozen: FactorSet, d: int) -> np.ndarray:
    """Gradient of the exact TD objective with respect to ``Q_d``, in matrix form.

    With the bootstrap frozen the objective is a weighted least-squares
    problem ``sum_h ||b_h - C_h q||^2_{W_h}`` whose weights are the visit
    probabilities and whose targets are expected one-step backups.
    """
    H = m.horizon
    marg = state_distributions(m, p)
    fz = q_table(m, frozen)
    states = np.arange(m.n_states)
    T = f.ndim - 1
    n_rows = f.dims[d] - 1 if d == T else f.dims[d]
    q = f.factors[d][:n_rows].ravel()
    g = np.zeros(n_rows * f.rank)
    for h in range(H):
        C = build_coefficient_block(m, p, f, d, h)[:, :n_rows * f.rank]
        w = np.zeros(m.n_pairs)
        w[states * m.n_actions + p.actions[h]] = marg[h] / H
        b = m.reward_at(h).copy()
        if h < H - 1:
            b += m.transition @ fz[h + 1][states, p.actions[h + 1]]
        g += -2.0 * (C.T @ (w * (b - C @ q)))
    out = np.zeros_like(f.factors[d])
    out[:n_rows] = g.reshape(n_rows, f.rank)
    return out


# --------------------------------------------------------------------------
# settings and curves


@dataclass
class StochSettings:
    episodes: int = 1000
    rank: int = 10
    alpha0: float = 0.05
    alpha_half: float | None = 1e5  # transitions until the step halves; None keeps it constant
    eps0: float = 1.0
    eps_min: float = 0.01
    eps_decay_frac: float = 0.8
    stop_tol: float = 0.0
    inner_iters: int = 1
    eval_interval: int = 100
    eval_episodes: int = 100
    seed: int | None = None
    init_scale: float | None = None
    max_norm: float = 1e12
    scaled_step: bool = False  # divide each block step by 1 + ||p||^2
    smooth_window: int = 1  # trailing window for smoothed per-episode returns

    def __post_init__(self):
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be >= 0")
        if not 0.0 <= self.eps0 <= 1.0 or not 0.0 <= self.eps_min <= 1.0:
            raise ValueError("exploration rates must lie in [0, 1]")
        if self.episodes < 1 or self.rank < 1 or self.inner_iters < 1:
            raise ValueError("episodes, rank and inner_iters must be >= 1")
        if self.eval_interval < 1 or self.eval_episodes < 1 or self.smooth_window < 1:
            raise ValueError("evaluation settings must be >= 1")

    def alpha(self, m: int) -> float:
        """Step size for the ``m``-th update (0-based)."""
        if self.alpha_half is None:
            return self.alpha0
        return self.alpha0 / (1.0 + m / self.alpha_half)

    def epsilon(self, episode: int) -> float:
        """Exploration rate for ``episode`` (0-based): geometric decay, then flat."""
        if self.eps0 <= self.eps_min or self.eps0 == 0.0:
            return self.eps0
        span = max(1.0, self.eps_decay_frac * self.episodes)
        if episode >= span:
            return self.eps_min
        floor = max(self.eps_min, 1e-12)
        return max(self.eps_min, self.eps0 * (floor / self.eps0) ** (episode / span))


CURVE_COLUMNS = ("episode", "return_eval_mean", "transitions_seen", "param_count", "wall_ms")


@dataclass
class LearningCurve:
    """Per-episode behavior returns and transition counts plus periodic greedy evaluations."""

    param_count: int
    returns: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    eval_episode: list = field(default_factory=list)
    eval_return: list = field(default_factory=list)
    eval_transitions: list = field(default_factory=list)
    eval_wall_ms: list = field(default_factory=list)

    @property
    def final_return(self) -> float:
        return self.eval_return[-1] if self.eval_return else math.nan

    def smoothed_returns(self, window: int) -> np.ndarray:
        """Trailing mean of the per-episode returns over the last ``window`` episodes."""
        r = np.asarray(self.returns, dtype=float)
        c = np.concatenate(([0.0], np.cumsum(r)))
        idx = np.arange(1, r.size + 1)
        lo = np.maximum(idx - window, 0)
        return (c[idx] - c[lo]) / (idx - lo)

    def transitions_to_reach(self, target: float) -> float:
        """Transitions seen at the first evaluation whose return reaches ``target`` (inf if none)."""
        for ret, n in zip(self.eval_return, self.eval_transitions):
            if ret >= target:
                return n
        return math.inf

    def to_csv(self, timing: bool = True) -> str:
        cols = [c for c in CURVE_COLUMNS if timing or c != "wall_ms"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for e, ret, n, ms in zip(self.eval_episode, self.eval_return, self.eval_transitions, self.eval_wall_ms):
            row = [e, repr(float(ret)), n, self.param_count] + ([f"{ms:.3f}"] if timing else [])
            w.writerow(row)
        return buf.getvalue()


# --------------------------------------------------------------------------
# learners


class FactorLearner:
    """PARAFAC value model updated in place by the compiled kernels."""

    def __init__(self, env, rank: int, rule: str, rng, init_scale=None, f0: FactorSet | None = None,
                 max_norm: float = 1e12, scaled_step: bool = False):
        if rule not in RULE_CODES:
            raise ValueError(f"unknown rule {rule!r}")
        self.env = env
        self.rule = RULE_CODES[rule]
        self.f = f0.copy() if f0 is not None else FactorSet.random(
            env.tensor_dims, rank, rng=rng, scale=init_scale, pinned_time_row=True)
        self.f.pinned_time_row = True
        self.f.factors[-1][-1] = 0.0
        self.dims = np.asarray(self.f.dims, dtype=np.int64)
        self.K = self.f.rank
        self.n_sm = len(env.state_dims)
        self.H = env.horizon
        self.max_norm = max_norm
        self.scaled = int(scaled_step)
        self._work = np.empty(env.n_actions)
        self.snapshot = None  # factors used for action selection when improvement is delayed

    @property
    def param_count(self) -> int:
        return self.f.param_count

    def _theta(self):
        return self.snapshot if self.snapshot is not None else self.f.data

    def greedy(self, s: int, h: int) -> int:
        a, _ = kernels.greedy_action(self._theta(), self.f.offsets, self.dims, self.K, self.n_sm,
                                     s, h, self._work)
        return int(a)

    def refresh(self):
        if self.snapshot is not None:
            self.snapshot[:] = self.f.data

    def update(self, s, a, r, s2, a2, h, alpha) -> float:
        delta = kernels.transition_update(self.f.data, self.f.offsets, self.dims, self.K, self.n_sm,
                                          s, a, h, s2, a2, r, alpha, self.rule, self.scaled)
        nrm = kernels.normalize(self.f.data, self.f.offsets, self.K, self.f.ndim)
        if not math.isfinite(nrm) or nrm > self.max_norm:
            raise DivergenceError(f"factor norm {nrm:.3g} exceeds {self.max_norm:.3g}")
        return delta

    def learn(self, s, a, r, s2, h, alpha) -> float:
        a2 = self.greedy(s2, h + 1) if h < self.H - 1 else TERMINAL
        return self.update(s, a, r, s2, a2, h, alpha)

    def q_values(self, m) -> np.ndarray:
        return q_table(m, self.f)


class TabularLearner:
    """Finite-horizon Q-learning on an ``(H + 1) x |S| x |A|`` table."""

    def __init__(self, env):
        n = env.n_states * env.n_actions * (env.horizon + 1)
        if n > MAX_TABLE_ENTRIES:
            raise CapacityError(f"Q-table needs {n} entries", requested=n)
        self.H = env.horizon
        self.q = np.zeros((env.horizon + 1, env.n_states, env.n_actions))

    @property
    def param_count(self) -> int:
        return self.H * self.q.shape[1] * self.q.shape[2]

    def greedy(self, s, h):
        return int(np.argmax(self.q[h, s]))

    def learn(self, s, a, r, s2, h, alpha):
        boot = self.q[h + 1, s2].max() if h < self.H - 1 else 0.0
        delta = r + boot - self.q[h, s, a]
        self.q[h, s, a] += alpha * delta
        return delta

    def q_values(self, m) -> np.ndarray:
        return self.q


class StationaryLearner:
    """Q-learning that ignores the time index; episode ends are still respected."""

    def __init__(self, env):
        n = env.n_states * env.n_actions
        if n > MAX_TABLE_ENTRIES:
            raise CapacityError(f"Q-table needs {n} entries", requested=n)
        self.H = env.horizon
        self.q = np.zeros((env.n_states, env.n_actions))

    @property
    def param_count(self) -> int:
        return self.q.size

    def greedy(self, s, h):
        return int(np.argmax(self.q[s]))

    def learn(self, s, a, r, s2, h, alpha):
        boot = self.q[s2].max() if h < self.H - 1 else 0.0
        delta = r + boot - self.q[s, a]
        self.q[s, a] += alpha * delta
        return delta

    def q_values(self, m) -> np.ndarray:
        return np.broadcast_to(self.q, (self.H + 1,) + self.q.shape)


class OneHotFeatures:
    """One-hot code of every state and action dimension, with a separate block per time step.

    ``Q_h(s, a)`` is a sum of one weight per dimension, so the greedy action
    is found dimension by dimension.
    """

    def __init__(self, state_dims, action_dims, horizon):
        self.state_dims = tuple(state_dims)
        self.action_dims = tuple(action_dims)
        self.horizon = horizon
        sizes = self.state_dims + self.action_dims
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.block = int(self.offsets[-1])
        self.n_features = self.block * horizon
        self.n_sd = len(self.state_dims)

    def active(self, s, a, h):
        idx = np.unravel_index(s, self.state_dims) + np.unravel_index(a, self.action_dims)
        return h * self.block + self.offsets[:-1] + np.asarray(idx)

    def __call__(self, s, a, h):
        out = np.zeros(self.n_features)
        out[self.active(s, a, h)] = 1.0
        return out

    def greedy(self, w, s, h):
        base = h * self.block
        parts = []
        for j, n in enumerate(self.action_dims):
            lo = base + self.offsets[self.n_sd + j]
            parts.append(int(np.argmax(w[lo:lo + n])))
        return int(np.ravel_multi_index(parts, self.action_dims)) if parts else 0

    def max_value(self, w, s, h):
        return self.value(w, s, self.greedy(w, s, h), h)

    def value(self, w, s, a, h):
        return float(w[self.active(s, a, h)].sum())


class TabularFeatures:
    """Indicator of the ``(h, s, a)`` triple; linear TD on it is tabular Q-learning."""

    def __init__(self, n_states, n_actions, horizon):
        self.n_states, self.n_actions, self.horizon = n_states, n_actions, horizon
        self.n_features = n_states * n_actions * horizon

    def active(self, s, a, h):
        return np.array([(h * self.n_states + s) * self.n_actions + a])

    def __call__(self, s, a, h):
        out = np.zeros(self.n_features)
        out[self.active(s, a, h)] = 1.0
        return out

    def greedy(self, w, s, h):
        lo = (h * self.n_states + s) * self.n_actions
        return int(np.argmax(w[lo:lo + self.n_actions]))

    def max_value(self, w, s, h):
        lo = (h * self.n_states + s) * self.n_actions
        return float(w[lo:lo + self.n_actions].max())

    def value(self, w, s, a, h):
        return float(w[self.active(s, a, h)].sum())


class LinearLearner:
    """Semi-gradient TD with a linear model ``Q_h(s, a) = w . phi(s, a, h)``.

    ``features`` is any callable returning a dense vector with an
    ``n_features`` attribute; the bundled maps also provide sparse fast
    paths (``active``, ``greedy``, ``max_value``) which are used when present.
    """

    def __init__(self, env, features):
        self.env = env
        self.phi = features
        self.H = env.horizon
        self.w = np.zeros(features.n_features)
        self._sparse = hasattr(features, "active")

    @property
    def param_count(self) -> int:
        return self.w.size

    def value(self, s, a, h):
        if self._sparse:
            return float(self.w[self.phi.active(s, a, h)].sum())
        return float(self.w @ self.phi(s, a, h))

    def greedy(self, s, h):
        if hasattr(self.phi, "greedy"):
            return self.phi.greedy(self.w, s, h)
        return int(np.argmax([self.value(s, a, h) for a in range(self.env.n_actions)]))

    def learn(self, s, a, r, s2, h, alpha):
        boot = 0.0
        if h < self.H - 1:
            if hasattr(self.phi, "max_value"):
                boot = self.phi.max_value(self.w, s2, h + 1)
            else:
                boot = max(self.value(s2, b, h + 1) for b in range(self.env.n_actions))
        delta = r + boot - self.value(s, a, h)
        if self._sparse:
            np.add.at(self.w, self.phi.active(s, a, h), alpha * delta)
        else:
            self.w += alpha * delta * self.phi(s, a, h)
        return delta

    def q_values(self, m) -> np.ndarray:
        q = np.zeros((self.H + 1, m.n_states, m.n_actions))
        for h in range(self.H):
            for s in range(m.n_states):
                for a in range(m.n_actions):
                    q[h, s, a] = self.value(s, a, h)
        return q


# --------------------------------------------------------------------------
# evaluation and the online loop


def greedy_policy(learner, m) -> NonstationaryPolicy:
    return policy_improvement(np.asarray(learner.q_values(m))[:m.horizon])


def evaluate(learner, env, settings: StochSettings, rng) -> float:
    """Return of the learner's greedy policy: exact with a tabular model, else Monte Carlo."""
    if getattr(env, "has_model", False):
        m = env.model
        return policy_return(m, greedy_policy(learner, m))
    total = 0.0
    for _ in range(settings.eval_episodes):
        s = env.reset(rng)
        for h in range(env.horizon):
            r, s = env.step(s, learner.greedy(s, h), h, rng)
            total += r
    return total / settings.eval_episodes


def run_online(env, learner, settings: StochSettings) -> LearningCurve:
    """Epsilon-greedy interaction where every transition updates the learner.

    Behavior and evaluation use separate random streams derived from
    ``settings.seed`` so that evaluation never perturbs the training data.
    """
    ss = np.random.SeedSequence(settings.seed)
    rng, eval_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    curve = LearningCurve(learner.param_count)
    H = env.horizon
    nA = env.n_actions
    m = 0
    t0 = time.perf_counter()
    M = settings.inner_iters
    if M > 1 and isinstance(learner, FactorLearner):
        learner.snapshot = learner.f.data.copy()
    for episode in range(settings.episodes):
        eps = settings.epsilon(episode)
        s = env.reset(rng)
        ret = 0.0
        for h in range(H):
            if eps > 0.0 and rng.random() < eps:
                a = int(rng.integers(nA))
            else:
                a = learner.greedy(s, h)
            r, s2 = env.step(s, a, h, rng)
            learner.learn(s, a, r, s2, h, settings.alpha(m))
            m += 1
            if M > 1 and m % M == 0:
                learner.refresh()
            ret += r
            s = s2
        curve.returns.append(ret)
        curve.transitions.append(m)
        if (episode + 1) % settings.eval_interval == 0 or episode + 1 == settings.episodes:
            curve.eval_episode.append(episode + 1)
            curve.eval_return.append(evaluate(learner, env, settings, eval_rng))
            curve.eval_transitions.append(m)
            curve.eval_wall_ms.append((time.perf_counter() - t0) * 1e3)
    return curve


def online_pi(env, settings: StochSettings, rule: str = BCTD, f0: FactorSet | None = None):
    """Learn a PARAFAC value model while acting epsilon-greedily on it.

    Bootstrap actions are greedy under the factors before the update.
    Returns ``(greedy policy or None, curve, factors)``; the policy table is
    only built when the environment has a tabular model.
    """
    rng = np.random.default_rng(np.random.SeedSequence(settings.seed).spawn(3)[2])
    learner = FactorLearner(env, settings.rank, rule, rng, settings.init_scale, f0, settings.max_norm,
                            settings.scaled_step)
    try:
        curve = run_online(env, learner, settings)
    except DivergenceError as exc:
        exc.trace = learner.f
        raise
    pol = greedy_policy(learner, env.model) if getattr(env, "has_model", False) else None
    return pol, curve, learner.f


def fhql(env, settings: StochSettings):
    """Tabular finite-horizon Q-learning baseline; returns ``(table, curve)``."""
    learner = TabularLearner(env)
    curve = run_online(env, learner, settings)
    return learner.q, curve


def lfhql(env, settings: StochSettings, feature_map=None):
    """Linear TD baseline; default features are per-dimension one-hot codes per time step."""
    if feature_map is None:
        feature_map = OneHotFeatures(env.state_dims, env.action_dims, env.horizon)
    learner = LinearLearner(env, feature_map)
    curve = run_online(env, learner, settings)
    return learner.w, curve


def time_agnostic_ql(env, settings: StochSettings):
    """Q-learning with a single stationary table; ablates the time dimension."""
    learner = StationaryLearner(env)
    curve = run_online(env, learner, settings)
    return learner.q, curve


def random_baseline(env, episodes: int = 1000, seed=None) -> float:
    """Return of the uniformly random policy (exact when a tabular model exists)."""
    if getattr(env, "has_model", False):
        return uniform_policy_return(env.model)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(episodes):
        s = env.reset(rng)
        for h in range(env.horizon):
            r, s = env.step(s, int(rng.integers(env.n_actions)), h, rng)
            total += r
    return total / episodes


# --------------------------------------------------------------------------
# policy evaluation from samples


@dataclass
class StochPERecord:
    episode: int
    transitions: int
    mean_sq_error: float
    factor_change: float


def stoch_bc_pe(env, p: NonstationaryPolicy, settings: StochSettings, rule: str = BCTD,
                f0: FactorSet | None = None):
    """Evaluate a fixed policy from its own sampled episodes.

    Every transition runs one cyclic pass over the modes followed by
    normalization.  The trace holds one record per episode; learning stops
    early once the squared factor change over an episode is at most
    ``settings.stop_tol`` (when that is positive).
    """
    rng = np.random.default_rng(settings.seed)
    learner = FactorLearner(env, settings.rank, rule, rng, settings.init_scale, f0, settings.max_norm,
                            settings.scaled_step)
    H = env.horizon
    trace = []
    m = 0
    for episode in range(settings.episodes):
        before = learner.f.data.copy()
        s = env.reset(rng)
        sq = 0.0
        for h in range(H):
            a = int(p.actions[h, s])
            r, s2 = env.step(s, a, h, rng)
            a2 = int(p.actions[h + 1, s2]) if h < H - 1 else TERMINAL
            try:
                delta = learner.update(s, a, r, s2, a2, h, settings.alpha(m))
            except DivergenceError as exc:
                exc.trace = trace
                raise
            sq += delta * delta
            m += 1
            s = s2
        change = float(np.sum((learner.f.data - before) ** 2))
        trace.append(StochPERecord(episode + 1, m, sq / H, change))
        if settings.stop_tol > 0 and change <= settings.stop_tol:
            break
    return learner.f, trace
