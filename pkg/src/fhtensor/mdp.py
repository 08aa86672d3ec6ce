"""Finite-horizon tabular MDPs, non-stationary policies and exact DP oracles.

Indices are 0-based throughout: states ``0..|S|-1``, actions ``0..|A|-1`` and
time steps ``h = 0..H-1``.  A state-action pair has flat index
``s * |A| + a``, matching the row-major tensor layout of ``tensor_core``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from fhtensor.errors import ConfigError, InvalidValueError
from fhtensor.tensor_core import DenseTensor

#: Placeholder next action for the last transition of an episode.
TERMINAL = -1


def flatten(dims: Sequence[int], idx: Sequence[int]) -> int:
    """Row-major flat index of a multi-index."""
    if len(idx) != len(dims):
        raise IndexError(f"expected {len(dims)} components, got {len(idx)}")
    flat = 0
    for i, n in zip(idx, dims):
        if not 0 <= i < n:
            raise IndexError(f"component {i} out of range [0, {n})")
        flat = flat * n + int(i)
    return flat


def unflatten(dims: Sequence[int], flat: int) -> tuple:
    total = math.prod(dims)
    if not 0 <= flat < total:
        raise IndexError(f"flat index {flat} out of range [0, {total})")
    out = []
    for n in reversed(dims):
        flat, r = divmod(int(flat), n)
        out.append(r)
    return tuple(reversed(out))


def pair_index(s: int, a: int, n_actions: int) -> int:
    if not 0 <= a < n_actions or s < 0:
        raise IndexError(f"pair ({s}, {a}) out of range")
    return s * n_actions + a


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    a_next: int  # TERMINAL at the last step
    h: int


class TabularMDP:
    """Finite-horizon MDP with factored state and action spaces.

    ``transition`` is a ``(|S||A|) x |S|`` row-stochastic matrix (stored as
    CSR) and ``reward`` a length ``|S||A|`` vector.  ``terminal_reward``, if
    given, is added to the reward at the last step only; it lets an
    environment express an end-of-horizon penalty without a time-varying
    reward function.
    """

    def __init__(self, state_dims, action_dims, horizon, transition, reward,
                 initial_dist=None, terminal_reward=None, name="mdp"):
        self.state_dims = tuple(int(n) for n in state_dims)
        self.action_dims = tuple(int(n) for n in action_dims)
        self.horizon = int(horizon)
        self.name = name
        if min(self.state_dims + self.action_dims, default=0) < 1 or self.horizon < 1:
            raise ConfigError("dimensions and horizon must be positive")
        self.n_states = math.prod(self.state_dims)
        self.n_actions = math.prod(self.action_dims)
        n_pairs = self.n_states * self.n_actions

        P = sp.csr_matrix(transition, dtype=float)
        P.sum_duplicates()
        P.eliminate_zeros()
        if P.shape != (n_pairs, self.n_states):
            raise ConfigError(f"transition has shape {P.shape}, expected {(n_pairs, self.n_states)}")
        if P.nnz and P.data.min() < 0:
            raise ConfigError("negative transition probability")
        rows = np.asarray(P.sum(axis=1)).ravel()
        if np.any(np.abs(rows - 1.0) > 1e-9):
            bad = int(np.argmax(np.abs(rows - 1.0)))
            raise ConfigError(f"transition row {bad} sums to {rows[bad]}")
        self.transition = P

        self.reward = np.asarray(reward, dtype=float).ravel()
        if self.reward.size != n_pairs:
            raise ConfigError("reward must have |S||A| entries")
        if terminal_reward is not None:
            terminal_reward = np.asarray(terminal_reward, dtype=float).ravel()
            if terminal_reward.size != n_pairs:
                raise ConfigError("terminal_reward must have |S||A| entries")
            if not np.any(terminal_reward):
                terminal_reward = None
        self.terminal_reward = terminal_reward

        if initial_dist is None:
            initial_dist = np.full(self.n_states, 1.0 / self.n_states)
        self.initial_dist = np.asarray(initial_dist, dtype=float).ravel()
        if self.initial_dist.size != self.n_states or np.any(self.initial_dist < 0):
            raise ConfigError("initial_dist must be a probability vector over states")
        if abs(self.initial_dist.sum() - 1.0) > 1e-9:
            raise ConfigError("initial_dist must sum to 1")

        self._cum = None
        self._init_cum = np.cumsum(self.initial_dist)

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    @property
    def tensor_dims(self) -> tuple:
        """Dims of the value tensor: state modes, action modes, then ``H + 1`` time rows."""
        return self.state_dims + self.action_dims + (self.horizon + 1,)

    @property
    def model(self) -> "TabularMDP":
        return self

    @property
    def has_model(self) -> bool:
        return True

    @property
    def tabular_size(self) -> int:
        return self.n_pairs * self.horizon

    def reward_at(self, h: int) -> np.ndarray:
        if self.terminal_reward is not None and h == self.horizon - 1:
            return self.reward + self.terminal_reward
        return self.reward

    def reward_value(self, s: int, a: int, h: int) -> float:
        i = s * self.n_actions + a
        r = self.reward[i]
        if self.terminal_reward is not None and h == self.horizon - 1:
            r += self.terminal_reward[i]
        return float(r)

    def next_state_dist(self, s: int, a: int):
        """``(next_states, probabilities)`` for the pair ``(s, a)``."""
        i = s * self.n_actions + a
        lo, hi = self.transition.indptr[i], self.transition.indptr[i + 1]
        return self.transition.indices[lo:hi], self.transition.data[lo:hi]

    # -- sampling interface shared with the large on-the-fly environments --

    def reset(self, rng) -> int:
        u = rng.random()
        return int(min(np.searchsorted(self._init_cum, u, side="right"), self.n_states - 1))

    def step(self, s: int, a: int, h: int, rng):
        """Sample ``(r, s_next)`` from state ``s`` under action ``a`` at step ``h``."""
        if self._cum is None:
            self._cum = np.cumsum(self.transition.data)
        P = self.transition
        i = s * self.n_actions + a
        lo, hi = P.indptr[i], P.indptr[i + 1]
        if hi - lo == 1:
            s2 = P.indices[lo]
        else:
            base = self._cum[lo - 1] if lo > 0 else 0.0
            u = base + rng.random() * (self._cum[hi - 1] - base)
            j = lo + int(np.searchsorted(self._cum[lo:hi], u, side="right"))
            s2 = P.indices[min(j, hi - 1)]
        return self.reward_value(s, a, h), int(s2)

    # -- serialization --

    def to_json(self) -> str:
        P = self.transition
        rows = [[[int(c), float(p)] for c, p in zip(P.indices[P.indptr[i]:P.indptr[i + 1]],
                                                     P.data[P.indptr[i]:P.indptr[i + 1]])]
                for i in range(P.shape[0])]
        doc = {
            "state_dims": list(self.state_dims),
            "action_dims": list(self.action_dims),
            "horizon": self.horizon,
            "reward": self.reward.tolist(),
            "transition": {"rows": rows},
            "initial_dist": self.initial_dist.tolist(),
        }
        if self.terminal_reward is not None:
            doc["terminal_reward"] = self.terminal_reward.tolist()
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        doc = json.loads(text)
        n_states = math.prod(doc["state_dims"])
        rows, cols, vals = [], [], []
        for i, row in enumerate(doc["transition"]["rows"]):
            for c, p in row:
                rows.append(i)
                cols.append(c)
                vals.append(p)
        n_pairs = len(doc["transition"]["rows"])
        P = sp.csr_matrix((vals, (rows, cols)), shape=(n_pairs, n_states))
        return cls(doc["state_dims"], doc["action_dims"], doc["horizon"], P, doc["reward"],
                   doc.get("initial_dist"), doc.get("terminal_reward"))

    def __repr__(self):
        return (f"TabularMDP({self.name}, S={self.state_dims}, A={self.action_dims}, "
                f"H={self.horizon})")


@dataclass
class NonstationaryPolicy:
    """Deterministic policy table: ``actions[h, s]`` is the action at step ``h``."""

    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.ndim != 2:
            raise ValueError("policy table must be H x |S|")

    def validate(self, m: TabularMDP):
        if self.actions.shape != (m.horizon, m.n_states):
            raise ValueError(f"policy shape {self.actions.shape} does not match "
                             f"{(m.horizon, m.n_states)}")
        if self.actions.min() < 0 or self.actions.max() >= m.n_actions:
            raise IndexError("policy action out of range")

    def __call__(self, h: int, s: int) -> int:
        return int(self.actions[h, s])

    def distance(self, other: "NonstationaryPolicy") -> int:
        """Hamming distance between policy tables."""
        return int(np.count_nonzero(self.actions != other.actions))

    def copy(self) -> "NonstationaryPolicy":
        return NonstationaryPolicy(self.actions.copy())


@dataclass
class DPTable:
    """Exact Q-values as an ``(H + 1) x |S| x |A|`` array; slice ``H`` is zero."""

    values: np.ndarray

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    def to_tensor(self, m: TabularMDP) -> DenseTensor:
        arr = self.values.reshape(self.horizon + 1, -1).T  # pair x time
        return DenseTensor(m.tensor_dims, arr.ravel())

    @classmethod
    def from_tensor(cls, t: DenseTensor, m: TabularMDP) -> "DPTable":
        arr = t.values.reshape(m.n_pairs, m.horizon + 1).T
        return cls(arr.reshape(m.horizon + 1, m.n_states, m.n_actions).copy())


def random_policy(m: TabularMDP, rng) -> NonstationaryPolicy:
    rng = np.random.default_rng(rng)
    return NonstationaryPolicy(rng.integers(0, m.n_actions, size=(m.horizon, m.n_states)))


def _expect_next(m: TabularMDP, v_next: np.ndarray) -> np.ndarray:
    """``sum_s' P(s'|s,a) v_next(s')`` for every pair, shaped ``|S| x |A|``."""
    return (m.transition @ v_next).reshape(m.n_states, m.n_actions)


def exact_policy_evaluation(m: TabularMDP, p: NonstationaryPolicy) -> DPTable:
    """Backward recursion for ``Q^pi`` with ``Q_{H} = 0`` (0-based)."""
    p.validate(m)
    H = m.horizon
    q = np.zeros((H + 1, m.n_states, m.n_actions))
    states = np.arange(m.n_states)
    for h in range(H - 1, -1, -1):
        r = m.reward_at(h).reshape(m.n_states, m.n_actions)
        if h == H - 1:
            q[h] = r
        else:
            v_next = q[h + 1][states, p.actions[h + 1]]
            q[h] = r + _expect_next(m, v_next)
    return DPTable(q)


def exact_optimal_values(m: TabularMDP) -> DPTable:
    H = m.horizon
    q = np.zeros((H + 1, m.n_states, m.n_actions))
    for h in range(H - 1, -1, -1):
        r = m.reward_at(h).reshape(m.n_states, m.n_actions)
        q[h] = r + _expect_next(m, q[h + 1].max(axis=1))
    return DPTable(q)


def uniform_policy_values(m: TabularMDP) -> DPTable:
    """Q-values of the policy that picks actions uniformly at random."""
    H = m.horizon
    q = np.zeros((H + 1, m.n_states, m.n_actions))
    for h in range(H - 1, -1, -1):
        r = m.reward_at(h).reshape(m.n_states, m.n_actions)
        q[h] = r + _expect_next(m, q[h + 1].mean(axis=1))
    return DPTable(q)


def uniform_policy_return(m: TabularMDP) -> float:
    return float(m.initial_dist @ uniform_policy_values(m).values[0].mean(axis=1))


def policy_improvement(q) -> NonstationaryPolicy:
    """Greedy policy; ties go to the lowest action index.

    ``q`` may be a ``DPTable`` or an array with at least ``H`` leading time
    slices of shape ``|S| x |A|``; a trailing terminal slice is ignored.
    """
    values = q.values[:-1] if isinstance(q, DPTable) else np.asarray(q, dtype=float)
    if np.isnan(values).any():
        raise InvalidValueError("NaN in Q-values")
    return NonstationaryPolicy(np.argmax(values, axis=2))


def policy_values(q: DPTable, p: NonstationaryPolicy) -> np.ndarray:
    """``V_h(s) = Q_h(s, pi_h(s))`` for ``h < H``."""
    H = p.actions.shape[0]
    states = np.arange(p.actions.shape[1])
    return np.stack([q.values[h][states, p.actions[h]] for h in range(H)])


def policy_return(m: TabularMDP, p: NonstationaryPolicy) -> float:
    """Exact expected return from the initial distribution."""
    q = exact_policy_evaluation(m, p)
    return float(m.initial_dist @ policy_values(q, p)[0])


def optimal_return(m: TabularMDP) -> float:
    return float(m.initial_dist @ exact_optimal_values(m).values[0].max(axis=1))


def transition_matrix_under_policy(m: TabularMDP, p: NonstationaryPolicy, h: int) -> sp.csr_matrix:
    """``|S||A| x |S||A|`` matrix with entry ``P(s'|s,a)`` at column ``(s', pi_h(s'))``."""
    if not 0 <= h < m.horizon:
        raise IndexError(f"time step {h} out of range")
    P = m.transition
    cols = P.indices * m.n_actions + p.actions[h][P.indices]
    return sp.csr_matrix((P.data, cols, P.indptr), shape=(m.n_pairs, m.n_pairs))


def state_distributions(m: TabularMDP, p: NonstationaryPolicy) -> np.ndarray:
    """``H x |S|`` array of state marginals ``P^pi_h`` propagated from ``initial_dist``."""
    H = m.horizon
    out = np.zeros((H, m.n_states))
    out[0] = m.initial_dist
    states = np.arange(m.n_states)
    for h in range(H - 1):
        pair_w = np.zeros(m.n_pairs)
        pair_w[states * m.n_actions + p.actions[h]] = out[h]
        out[h + 1] = m.transition.T @ pair_w
    return out


def sample_trajectory(m, p: NonstationaryPolicy, rng) -> list:
    """One episode of ``H`` transitions under ``p``.

    ``m`` can be a ``TabularMDP`` or any environment with the same
    ``reset``/``step`` interface.
    """
    H = m.horizon
    s = m.reset(rng)
    out = []
    for h in range(H):
        a = int(p.actions[h, s])
        r, s2 = m.step(s, a, h, rng)
        a2 = int(p.actions[h + 1, s2]) if h < H - 1 else TERMINAL
        out.append(Transition(s, a, r, s2, a2, h))
        s = s2
    return out


def empirical_return(m, p: NonstationaryPolicy, episodes: int, rng) -> float:
    return float(np.mean(sample_returns(m, p, episodes, rng)))


def sample_returns(m, p: NonstationaryPolicy, episodes: int, rng) -> np.ndarray:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    H = m.horizon
    out = np.empty(episodes)
    for e in range(episodes):
        s = m.reset(rng)
        total = 0.0
        for h in range(H):
            r, s = m.step(s, int(p.actions[h, s]), h, rng)
            total += r
        out[e] = total
    return out


def random_mdp(state_dims, action_dims, horizon, rng=None, deterministic=False,
               branching=None, reward_scale=1.0) -> TabularMDP:
    """A random MDP for tests and invariant checks.

    Each pair gets ``branching`` random successor states (all states when
    ``None``) with Dirichlet probabilities.
    """
    rng = np.random.default_rng(rng)
    nS = math.prod(state_dims)
    nA = math.prod(action_dims)
    N = nS * nA
    if deterministic:
        branching = 1
    k = nS if branching is None else min(branching, nS)
    P = np.zeros((N, nS))
    for i in range(N):
        succ = rng.choice(nS, size=k, replace=False)
        P[i, succ] = rng.dirichlet(np.ones(k)) if k > 1 else 1.0
    R = rng.normal(scale=reward_scale, size=N)
    init = rng.dirichlet(np.ones(nS))
    return TabularMDP(state_dims, action_dims, horizon, P, R, init, name="random")
