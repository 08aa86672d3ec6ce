"""Benchmark environments: grid-world, opportunistic wireless access, battery charging.

Every environment exposes ``state_dims``, ``action_dims``, ``horizon``,
``reset(rng)`` and ``step(s, a, h, rng) -> (r, s_next)`` on flat indices.
Small configurations can also be compiled into an exact ``TabularMDP``
(``env.model``); large ones are samplers only.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import numpy as np
import scipy.sparse as sp
from scipy.stats import binom

from fhtensor.errors import CapacityError, ConfigError
from fhtensor.mdp import TabularMDP, flatten, unflatten

#: Largest value tensor (entries incl. the terminal time slice) compiled to a TabularMDP.
MAX_TABULAR_ENTRIES = 2_000_000

GRID_MOVES = ((-1, 0), (0, 1), (0, -1), (1, 0), (0, 0))  # up, right, left, down, stay


def _from_dict(cls, doc):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**doc)


def load_preset(env: str, preset: str) -> dict:
    """Config dictionary for ``env`` from the bundled ``configs/<env>.json``."""
    try:
        text = resources.files("fhtensor").joinpath("configs").joinpath(f"{env}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown environment {env!r}") from None
    presets = json.loads(text)
    if preset not in presets:
        raise ConfigError(f"{env} has no preset {preset!r}; choose from {sorted(presets)}")
    return presets[preset]


class Environment:
    """Shared plumbing: tensor dims, lazy tabular model, flat index helpers."""

    name = "env"

    def __init__(self, state_dims, action_dims, horizon):
        self.state_dims = tuple(state_dims)
        self.action_dims = tuple(action_dims)
        self.horizon = int(horizon)
        self.n_states = math.prod(self.state_dims)
        self.n_actions = math.prod(self.action_dims)
        self._model = None

    @property
    def tensor_dims(self):
        return self.state_dims + self.action_dims + (self.horizon + 1,)

    @property
    def tensor_entries(self) -> int:
        return math.prod(self.tensor_dims)

    @property
    def tabular_size(self) -> int:
        """``|S||A|H``: parameters of a tabular finite-horizon Q-table."""
        return self.n_states * self.n_actions * self.horizon

    @property
    def has_model(self) -> bool:
        return self.tensor_entries <= MAX_TABULAR_ENTRIES

    @property
    def model(self) -> TabularMDP:
        if self._model is None:
            if not self.has_model:
                raise CapacityError(
                    f"{self.name}: value tensor has {self.tensor_entries} entries; "
                    f"tabular models are limited to {MAX_TABULAR_ENTRIES}",
                    requested=self.tensor_entries)
            self._model = self._build_model()
        return self._model

    def _build_model(self) -> TabularMDP:
        raise NotImplementedError


# --------------------------------------------------------------------- grid


@dataclass
class GridWorldConfig:
    width: int = 5
    height: int = 5
    horizon: int = 5
    corner_reward: float = 1.0
    stay_allowed: bool = True
    # False: a corner pays only when the agent moves into it from another cell
    collectible_repeats: bool = True
    initial: str = "uniform"  # "uniform", "center" or "corner"

    def validate(self):
        if self.width < 2 or self.height < 2:
            raise ConfigError("grid must be at least 2 x 2")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        if self.initial not in ("uniform", "center", "corner"):
            raise ConfigError(f"unknown initial distribution {self.initial!r}")


class GridWorld(Environment):
    """Deterministic grid with a reward in each corner."""

    name = "gridworld"

    def __init__(self, cfg: GridWorldConfig):
        cfg.validate()
        self.cfg = cfg
        self.moves = GRID_MOVES if cfg.stay_allowed else GRID_MOVES[:4]
        super().__init__((cfg.height, cfg.width), (len(self.moves),), cfg.horizon)
        self.corners = {(0, 0), (0, cfg.width - 1), (cfg.height - 1, 0),
                        (cfg.height - 1, cfg.width - 1)}

    def move(self, row, col, a):
        dr, dc = self.moves[a]
        r2, c2 = row + dr, col + dc
        if not (0 <= r2 < self.cfg.height and 0 <= c2 < self.cfg.width):
            return row, col
        return r2, c2

    def reward(self, row, col, a) -> float:
        if self.cfg.collectible_repeats:
            return self.cfg.corner_reward if (row, col) in self.corners else 0.0
        nxt = self.move(row, col, a)
        return self.cfg.corner_reward if nxt in self.corners and nxt != (row, col) else 0.0

    def corner_distance(self, s: int) -> int:
        row, col = divmod(s, self.cfg.width)
        return min(abs(row - r) + abs(col - c) for r, c in self.corners)

    def _initial(self):
        init = np.zeros(self.n_states)
        if self.cfg.initial == "uniform":
            init[:] = 1.0 / self.n_states
        elif self.cfg.initial == "center":
            init[flatten(self.state_dims, (self.cfg.height // 2, self.cfg.width // 2))] = 1.0
        else:
            init[0] = 1.0
        return init

    def _build_model(self):
        nA = self.n_actions
        P = sp.lil_matrix((self.n_states * nA, self.n_states))
        R = np.zeros(self.n_states * nA)
        for s in range(self.n_states):
            row, col = divmod(s, self.cfg.width)
            for a in range(nA):
                r2, c2 = self.move(row, col, a)
                P[s * nA + a, r2 * self.cfg.width + c2] = 1.0
                R[s * nA + a] = self.reward(row, col, a)
        return TabularMDP(self.state_dims, self.action_dims, self.horizon, P.tocsr(), R,
                          self._initial(), name=self.name)

    def reset(self, rng):
        return self.model.reset(rng)

    def step(self, s, a, h, rng):
        row, col = divmod(s, self.cfg.width)
        r2, c2 = self.move(row, col, a)
        return self.reward(row, col, a), r2 * self.cfg.width + c2


def build_gridworld(cfg: GridWorldConfig | None = None) -> GridWorld:
    return GridWorld(cfg or GridWorldConfig())


# ----------------------------------------------------------------- wireless


@dataclass
class WirelessConfig:
    channels: int = 3
    fading_gains: list = field(default_factory=lambda: [1.0, 3.0])
    occupancy_prob: float = 0.4
    battery_levels: int = 4
    queue_levels: int = 4
    power_values: list = field(default_factory=lambda: [0.0, 1.0])
    noise: float = 1.0
    loss_prob: float = 0.5
    arrival_prob: float = 0.0
    w_battery: float = 0.1
    w_queue: float = 1.0
    horizon: int = 5
    initial_battery: str = "full"  # "full" or "uniform"
    initial_queue: str = "full"  # "full" or "uniform"

    def validate(self):
        if self.channels < 1 or self.battery_levels < 1 or self.queue_levels < 1:
            raise ConfigError("wireless cardinalities must be >= 1")
        if not self.fading_gains or not self.power_values:
            raise ConfigError("need at least one fading level and one power level")
        if min(self.power_values) < 0 or min(self.fading_gains) < 0:
            raise ConfigError("powers and gains must be nonnegative")
        for name in ("loss_prob", "occupancy_prob", "arrival_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        for name in ("initial_battery", "initial_queue"):
            if getattr(self, name) not in ("full", "uniform"):
                raise ConfigError(f"{name} must be 'full' or 'uniform'")


class Wireless(Environment):
    """Single user sending queued packets over ``C`` opportunistic channels.

    State: fading level and occupancy of each channel, battery, queue.
    Action: a power level per channel.  The rate on a channel is
    ``floor(log2(1 + gain * power / noise))`` packets; packets sent over an
    occupied channel are lost independently with ``loss_prob`` and stay in
    the queue.  An action whose energy exceeds the battery has no effect.
    The reward is ``w_battery * battery_after - w_queue * E[queue_after]``
    (expected over packet losses, so it is a deterministic ``R(s, a)``).
    """

    name = "wireless"

    def __init__(self, cfg: WirelessConfig):
        cfg.validate()
        self.cfg = cfg
        C = cfg.channels
        nf = len(cfg.fading_gains)
        state_dims = (nf,) * C + (2,) * C + (cfg.battery_levels, cfg.queue_levels)
        super().__init__(state_dims, (len(cfg.power_values),) * C, cfg.horizon)
        gains = np.asarray(cfg.fading_gains, dtype=float)
        powers = np.asarray(cfg.power_values, dtype=float)
        self.rates = np.floor(np.log2(1.0 + np.outer(gains, powers) / cfg.noise) + 1e-12).astype(int)

    def decode(self, s, a):
        C = self.cfg.channels
        st = unflatten(self.state_dims, s)
        return st[:C], st[C:2 * C], st[2 * C], st[2 * C + 1], unflatten(self.action_dims, a)

    def plan(self, fading, occupied, battery, queue, power):
        """Deterministic part of a step: energy used, packets on free / occupied channels."""
        energy = sum(self.cfg.power_values[p] for p in power)
        energy_units = int(math.ceil(energy - 1e-12))
        if energy_units > battery:
            return 0, 0, 0
        rates = [int(self.rates[f, p]) for f, p in zip(fading, power)]
        free = sum(r for r, o in zip(rates, occupied) if not o)
        busy = sum(r for r, o in zip(rates, occupied) if o)
        send_free = min(free, queue)
        send_busy = min(busy, queue - send_free)
        return energy_units, send_free, send_busy

    def reward(self, s, a) -> float:
        fading, occupied, battery, queue, power = self.decode(s, a)
        energy, send_free, send_busy = self.plan(fading, occupied, battery, queue, power)
        expected_sent = send_free + send_busy * (1.0 - self.cfg.loss_prob)
        return (self.cfg.w_battery * (battery - energy)
                - self.cfg.w_queue * (queue - expected_sent))

    def _channel_sample(self, rng):
        C = self.cfg.channels
        fading = rng.integers(0, len(self.cfg.fading_gains), size=C)
        occupied = (rng.random(C) < self.cfg.occupancy_prob).astype(int)
        return fading, occupied

    def _initial_components(self, rng):
        cfg = self.cfg
        battery = cfg.battery_levels - 1 if cfg.initial_battery == "full" else rng.integers(cfg.battery_levels)
        queue = cfg.queue_levels - 1 if cfg.initial_queue == "full" else rng.integers(cfg.queue_levels)
        return battery, queue

    def reset(self, rng):
        fading, occupied = self._channel_sample(rng)
        battery, queue = self._initial_components(rng)
        return flatten(self.state_dims, tuple(fading) + tuple(occupied) + (battery, queue))

    def step(self, s, a, h, rng):
        fading, occupied, battery, queue, power = self.decode(s, a)
        energy, send_free, send_busy = self.plan(fading, occupied, battery, queue, power)
        delivered = send_free + (rng.binomial(send_busy, 1.0 - self.cfg.loss_prob) if send_busy else 0)
        arrival = int(rng.random() < self.cfg.arrival_prob) if self.cfg.arrival_prob > 0 else 0
        q2 = min(queue - delivered + arrival, self.cfg.queue_levels - 1)
        f2, o2 = self._channel_sample(rng)
        s2 = flatten(self.state_dims, tuple(f2) + tuple(o2) + (battery - energy, q2))
        return self.reward(s, a), s2

    def _channel_distribution(self):
        """Flat index offsets (channel part of the state) and their probabilities."""
        C = self.cfg.channels
        nf = len(self.cfg.fading_gains)
        p_occ = self.cfg.occupancy_prob
        idx, prob = [], []
        tail = self.cfg.battery_levels * self.cfg.queue_levels
        for combo in itertools.product(range(nf), repeat=C):
            for occ in itertools.product((0, 1), repeat=C):
                p = (1.0 / nf) ** C
                for o in occ:
                    p *= p_occ if o else 1.0 - p_occ
                if p > 0:
                    idx.append(flatten(self.state_dims[:2 * C], combo + occ) * tail)
                    prob.append(p)
        return np.array(idx), np.array(prob)

    def _initial(self):
        cfg = self.cfg
        ch_idx, ch_prob = self._channel_distribution()
        b_dist = np.zeros(cfg.battery_levels)
        q_dist = np.zeros(cfg.queue_levels)
        if cfg.initial_battery == "full":
            b_dist[-1] = 1.0
        else:
            b_dist[:] = 1.0 / cfg.battery_levels
        if cfg.initial_queue == "full":
            q_dist[-1] = 1.0
        else:
            q_dist[:] = 1.0 / cfg.queue_levels
        init = np.zeros(self.n_states)
        bq = np.outer(b_dist, q_dist).ravel()
        for i, p in zip(ch_idx, ch_prob):
            init[i:i + bq.size] += p * bq
        return init

    def _build_model(self):
        cfg = self.cfg
        nA = self.n_actions
        ch_idx, ch_prob = self._channel_distribution()
        rows, cols, vals = [], [], []
        R = np.zeros(self.n_states * nA)
        p_arr = cfg.arrival_prob
        for s in range(self.n_states):
            for a in range(nA):
                i = s * nA + a
                fading, occupied, battery, queue, power = self.decode(s, a)
                energy, send_free, send_busy = self.plan(fading, occupied, battery, queue, power)
                R[i] = self.reward(s, a)
                k = np.arange(send_busy + 1)
                p_del = binom.pmf(k, send_busy, 1.0 - cfg.loss_prob)
                tail = {}
                for kk, pk in zip(k, p_del):
                    for arr, pa in ((0, 1.0 - p_arr), (1, p_arr)):
                        if pa * pk == 0:
                            continue
                        q2 = min(queue - send_free - kk + arr, cfg.queue_levels - 1)
                        off = (battery - energy) * cfg.queue_levels + q2
                        tail[off] = tail.get(off, 0.0) + pa * pk
                offs = np.fromiter(tail.keys(), dtype=np.int64)
                probs = np.fromiter(tail.values(), dtype=float)
                cols.append((ch_idx[:, None] + offs[None, :]).ravel())
                vals.append((ch_prob[:, None] * probs[None, :]).ravel())
                rows.append(np.full(cols[-1].size, i))
        P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_states * nA, self.n_states))
        return TabularMDP(self.state_dims, self.action_dims, self.horizon, P, R,
                          self._initial(), name=self.name)


def build_wireless(cfg: WirelessConfig | None = None) -> Wireless:
    return Wireless(cfg or WirelessConfig())


# ------------------------------------------------------------------ battery


@dataclass
class BatteryConfig:
    soc_levels: int = 8
    solar_levels: int = 3
    wind_levels: int = 3
    price_values: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    rate_levels: int = 3  # charge rates 0 .. rate_levels-1 for each of solar, wind, grid
    target_soc: int = 5
    w_cost: float = 1.0
    w_degradation: float = 0.1
    w_shortfall: float = 5.0
    horizon: int = 5
    initial_soc: str = "below_target"  # "below_target", "empty" or "uniform"

    def validate(self):
        for name in ("soc_levels", "solar_levels", "wind_levels", "rate_levels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.price_values:
            raise ConfigError("need at least one price level")
        if not 0 <= self.target_soc < self.soc_levels:
            raise ConfigError("target_soc must be a valid SoC level")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        if self.initial_soc not in ("below_target", "empty", "uniform"):
            raise ConfigError(f"unknown initial_soc {self.initial_soc!r}")


class Battery(Environment):
    """Battery charged from solar, wind and the grid.

    State: SoC, solar availability, wind availability, grid price level.
    Action: a charge rate per source.  Renewable charging is capped by the
    current availability; grid charging costs ``price * rate``; degradation
    costs ``w_degradation`` per unit charged.  At the last step a penalty
    ``w_shortfall * (target - SoC_after)`` applies when the target is missed.
    Availabilities and prices are redrawn uniformly every step.
    """

    name = "battery"

    def __init__(self, cfg: BatteryConfig):
        cfg.validate()
        self.cfg = cfg
        state_dims = (cfg.soc_levels, cfg.solar_levels, cfg.wind_levels, len(cfg.price_values))
        super().__init__(state_dims, (cfg.rate_levels,) * 3, cfg.horizon)

    def outcome(self, s, a):
        """``(running_reward, terminal_penalty, soc_after)`` for flat ``s, a``."""
        cfg = self.cfg
        soc, solar, wind, price = unflatten(self.state_dims, s)
        r_solar, r_wind, r_grid = unflatten(self.action_dims, a)
        charged = min(r_solar, solar) + min(r_wind, wind) + r_grid
        soc2 = min(soc + charged, cfg.soc_levels - 1)
        running = -(cfg.w_cost * cfg.price_values[price] * r_grid + cfg.w_degradation * charged)
        terminal = -cfg.w_shortfall * max(0, cfg.target_soc - soc2)
        return running, terminal, soc2

    def _exo_sample(self, rng):
        cfg = self.cfg
        return (rng.integers(cfg.solar_levels), rng.integers(cfg.wind_levels),
                rng.integers(len(cfg.price_values)))

    def _initial_soc_dist(self):
        cfg = self.cfg
        d = np.zeros(cfg.soc_levels)
        if cfg.initial_soc == "empty" or cfg.target_soc == 0:
            d[0] = 1.0
        elif cfg.initial_soc == "below_target":
            d[:cfg.target_soc] = 1.0 / cfg.target_soc
        else:
            d[:] = 1.0 / cfg.soc_levels
        return d

    def reset(self, rng):
        d = self._initial_soc_dist()
        soc = int(min(np.searchsorted(np.cumsum(d), rng.random(), side="right"), d.size - 1))
        return flatten(self.state_dims, (soc,) + self._exo_sample(rng))

    def step(self, s, a, h, rng):
        running, terminal, soc2 = self.outcome(s, a)
        r = running + (terminal if h == self.horizon - 1 else 0.0)
        return r, flatten(self.state_dims, (soc2,) + self._exo_sample(rng))

    def _build_model(self):
        nA = self.n_actions
        n_exo = math.prod(self.state_dims[1:])
        exo_p = 1.0 / n_exo
        N = self.n_states * nA
        R = np.zeros(N)
        T = np.zeros(N)
        cols = np.zeros((N, n_exo), dtype=np.int64)
        for s in range(self.n_states):
            for a in range(nA):
                i = s * nA + a
                R[i], T[i], soc2 = self.outcome(s, a)
                cols[i] = soc2 * n_exo + np.arange(n_exo)
        P = sp.csr_matrix((np.full(N * n_exo, exo_p), cols.ravel(), np.arange(N + 1) * n_exo),
                          shape=(N, self.n_states))
        init = np.kron(self._initial_soc_dist(), np.full(n_exo, exo_p))
        return TabularMDP(self.state_dims, self.action_dims, self.horizon, P, R, init,
                          terminal_reward=T, name=self.name)


def build_battery(cfg: BatteryConfig | None = None) -> Battery:
    return Battery(cfg or BatteryConfig())


# ----------------------------------------------------------------- registry

ENVIRONMENTS = {
    "gridworld": (GridWorldConfig, build_gridworld),
    "wireless": (WirelessConfig, build_wireless),
    "battery": (BatteryConfig, build_battery),
}


def make_env(name: str, preset: str = "small", overrides: dict | None = None) -> Environment:
    """Build a bundled environment from its preset plus optional config overrides."""
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    cfg_cls, builder = ENVIRONMENTS[name]
    doc = dict(load_preset(name, preset))
    doc.update(overrides or {})
    return builder(_from_dict(cfg_cls, doc))


def config_dict(env: Environment) -> dict:
    return asdict(env.cfg)
