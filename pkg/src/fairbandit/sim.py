"""Slot-synchronous simulation of the protocol against a reward model.

Two engines produce the same run:

``slot``
    every agent is a :class:`~fairbandit.protocol.Agent`; each slot calls
    ``act`` on all agents, resolves collisions and rewards, then calls
    ``observe`` on all agents. Stretches where every agent's behaviour is
    fixed (ordering after all claims, exploitation blocks) are advanced in one
    step.
``fast``
    the ordering phase runs on the same agents; the epochs are then replayed
    centrally on arrays, with compiled kernels for sampling and auctions.

Both consume the reward stream identically (N uniforms per slot), so the same
seed yields the same decisions.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from . import kernels
from .model import IDLE, RewardModel, grid_means, latin_means, realize_slot, regret_increments
from .oracle import assignment_value, maxmin_exact
from .protocol import (
    Agent,
    Phase,
    ProtocolParams,
    auction_iterations,
    threshold_test_budget,
)
from .stats import exploitation_base, exploitation_length, exploration_length

GENERATORS = ("grid", "latin", "uniform", "explicit")
ENGINES = ("fast", "slot")
OPTIMALITY_TOL = 1e-12
MONOTONE_TOL = 1e-12


@dataclass
class SimulationConfig:
    n_agents: int = 10
    generator: str = "grid"
    means: list[list[float]] | None = None  # only for generator="explicit"
    family: str = "uniform"
    L: int = 100
    epochs: int = 256
    beta: int = 4
    skip_ordering: bool = False
    seed: int = 0
    c3_exponent_divisor: float = 32.0
    exploitation_base: float | None = None
    exploration_rule: str = "formula"
    max_threshold_tests: int = 64
    checkpoint_stride: int = 0
    max_slots: int | None = None
    engine: str = "fast"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; choose from {ENGINES}")
        if self.generator == "explicit":
            if self.means is None:
                raise ValueError("generator 'explicit' needs a means matrix")
            m = np.asarray(self.means, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"explicit means must be square, got shape {m.shape}")
            self.n_agents = m.shape[0]
        elif self.means is not None:
            raise ValueError("means given but generator is not 'explicit'")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.checkpoint_stride < 0:
            raise ValueError("checkpoint_stride must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.protocol_params()  # validates the protocol constants

    def protocol_params(self) -> ProtocolParams:
        return ProtocolParams(
            n_agents=self.n_agents,
            L=self.L,
            beta=self.beta,
            c3_divisor=self.c3_exponent_divisor,
            exploitation_base=self.exploitation_base,
            exploration_rule=self.exploration_rule,
            max_threshold_tests=self.max_threshold_tests,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimulationConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Checkpoint:
    slot: int
    cum_regret: float
    epoch: int
    phase: str


@dataclass(frozen=True)
class EpochMark:
    epoch: int
    phase: str
    start: int
    end: int


@dataclass
class RegretTrace:
    rho_star: float
    checkpoints: list[Checkpoint] = field(default_factory=list)
    epoch_marks: list[EpochMark] = field(default_factory=list)

    @property
    def cumulative_regret(self) -> list[tuple[int, float]]:
        return [(c.slot, c.cum_regret) for c in self.checkpoints]


@dataclass
class EpochRecord:
    epoch: int
    exploration_slots: int = 0
    matching_slots: int = 0
    exploitation_slots: int = 0
    c1: tuple[int, ...] = ()
    b_hat_max: float = 0.0
    delta_hat_min: float = math.inf
    tau_min: float = 0.0
    tau_max: float = math.inf
    threshold_tests: int = 0
    test_budget: float = math.inf
    assignment: tuple[int, ...] = ()
    fallback: bool = False
    matched_optimal: bool = False
    exploitation_base_min: float = 1.0
    exploitation_block: int = 0  # slots before the terminating sweep
    exploration_collisions: int = 0  # sampling slots (not signalling) with a collision
    exploitation_regret_outside_windows: float = 0.0


@dataclass
class SimulationResult:
    config: SimulationConfig
    means: np.ndarray
    rho_star: float
    optimal_assignment: tuple[int, ...]
    order: tuple[int, ...]
    ordering_slots: int
    trace: RegretTrace
    epochs: list[EpochRecord]
    total_slots: int
    truncated: bool = False
    wall_time: float = 0.0

    @property
    def regret_trace(self) -> RegretTrace:
        return self.trace

    @property
    def final_regret(self) -> float:
        return self.trace.checkpoints[-1].cum_regret if self.trace.checkpoints else 0.0


class TraceRecorder:
    """Accumulates pseudo-regret and records checkpoints.

    Checkpoints fall on powers of two, on every phase boundary, and every
    ``stride`` slots outside exploitation blocks when ``stride > 0``.
    """

    def __init__(self, rho_star: float, stride: int = 0):
        self.trace = RegretTrace(rho_star)
        self.stride = stride
        self.t = 0
        self.cum = 0.0
        self.epoch = 0
        self.phase = Phase.ORDERING.value
        self._phase_start = 1
        self._next_pow2 = 1

    def set_phase(self, epoch: int, phase: str) -> None:
        if (epoch, phase) == (self.epoch, self.phase):
            return
        self.close()
        self.epoch, self.phase = epoch, phase
        self._phase_start = self.t + 1

    def close(self) -> None:
        if self.t >= self._phase_start:
            self.trace.epoch_marks.append(EpochMark(self.epoch, self.phase, self._phase_start, self.t))
            self._checkpoint(self.t, self.cum)
        self._phase_start = self.t + 1

    def _checkpoint(self, t: int, cum: float) -> None:
        cps = self.trace.checkpoints
        if cps and cps[-1].slot == t:
            return
        cps.append(Checkpoint(t, cum, self.epoch, self.phase))

    def _grid_points(self, count: int, use_stride: bool):
        """Checkpoint slots in (t, t + count], ascending."""
        lo, hi = self.t + 1, self.t + count
        points = []
        while self._next_pow2 <= hi:
            if self._next_pow2 >= lo:
                points.append(self._next_pow2)
            self._next_pow2 *= 2
        if use_stride and self.stride:
            first = -(-lo // self.stride) * self.stride
            points.extend(range(first, hi + 1, self.stride))
            points = sorted(set(points))
        return points

    @staticmethod
    def _check(incs) -> None:
        if len(incs) and np.min(incs) < -MONOTONE_TOL:
            raise AssertionError(f"negative regret increment {np.min(incs)}")

    def add_slot(self, inc: float) -> None:
        self._check([inc])
        points = self._grid_points(1, self.phase != Phase.EXPLOITATION.value)
        self.t += 1
        self.cum += inc
        if points:
            self._checkpoint(self.t, self.cum)

    def add_sequence(self, incs) -> None:
        incs = np.asarray(incs, dtype=float)
        if len(incs) == 0:
            return
        self._check(incs)
        cs = np.cumsum(incs)
        for p in self._grid_points(len(incs), self.phase != Phase.EXPLOITATION.value):
            self._checkpoint(p, self.cum + float(cs[p - self.t - 1]))
        self.t += len(incs)
        self.cum += float(cs[-1])

    def add_periodic(self, incs, count: int) -> None:
        """``count`` slots whose increments cycle through ``incs``."""
        if count <= 0:
            return
        incs = np.asarray(incs, dtype=float)
        self._check(incs)
        period = len(incs)
        prefix = np.concatenate(([0.0], np.cumsum(incs)))
        total = float(prefix[-1])

        def partial(x: int) -> float:
            q, r = divmod(x, period)
            return q * total + float(prefix[r])

        for p in self._grid_points(count, self.phase != Phase.EXPLOITATION.value):
            self._checkpoint(p, self.cum + partial(p - self.t))
        self.t += count
        self.cum += partial(count)


def _build_model(cfg: SimulationConfig, rng: np.random.Generator) -> RewardModel:
    n = cfg.n_agents
    if cfg.generator == "explicit":
        means = np.asarray(cfg.means, dtype=float)
    elif cfg.generator == "grid":
        means = grid_means(n, rng)
    elif cfg.generator == "latin":
        means = latin_means(n, rng)
    else:
        means = rng.uniform(0.05, 1.0, size=(n, n))
    return RewardModel(means, cfg.family)


def _streams(seed: int, n: int):
    model_ss, reward_ss, agent_ss = np.random.SeedSequence(seed).spawn(3)
    reward_rng = np.random.Generator(np.random.PCG64(reward_ss))
    agent_rngs = [np.random.Generator(np.random.PCG64(s)) for s in agent_ss.spawn(n)]
    return np.random.Generator(np.random.PCG64(model_ss)), reward_rng, agent_rngs


def _lcm_period(patterns) -> int:
    p = 1
    for pat in patterns:
        p = math.lcm(p, len(pat))
    return p


class Environment:
    """Reward model, its oracle value, the reward stream and the regret trace."""

    def __init__(self, model: RewardModel, reward_rng: np.random.Generator, stride: int = 0):
        self.model = model
        self.n = model.n_agents
        sol = maxmin_exact(model.means)
        self.rho_star = sol.rho_star
        self.optimal_assignment = sol.assignment
        self.rng = reward_rng
        self.recorder = TraceRecorder(self.rho_star, stride)

    @property
    def t(self) -> int:
        return self.recorder.t

    def advance_slot(self, actions) -> tuple[list, float, bool]:
        """Resolve one slot: feedback per agent, regret increment, any collision."""
        feedback = realize_slot(self.model, actions, self.rng)
        inc = float(regret_increments(self.model.means, self.rho_star, np.asarray(actions)[None, :])[0])
        self.recorder.add_slot(inc)
        collided = any(a != IDLE and not f.no_collision for a, f in zip(actions, feedback))
        return feedback, inc, collided

    def skip_rewards(self, slots: int) -> None:
        self.rng.bit_generator.advance(slots * self.n)

    def increments(self, profiles) -> np.ndarray:
        return regret_increments(self.model.means, self.rho_star, np.asarray(profiles))


class SlotDriver:
    """Drives Agent objects slot by slot through an Environment."""

    def __init__(self, env: Environment, agents: list[Agent], n_epochs: int, max_slots: int | None = None):
        self.env = env
        self.agents = agents
        self.n_epochs = n_epochs
        self.max_slots = max_slots
        self.records: list[EpochRecord] = []
        self.truncated = False
        self.ordering_slots = 0

    def _common_state(self) -> tuple[int, Phase]:
        states = {(a.epoch, a.phase) for a in self.agents}
        if len(states) != 1:
            raise AssertionError(f"agents out of sync: {sorted((e, p.value) for e, p in states)}")
        return states.pop()

    def run(self, ordering_only: bool = False) -> None:
        rec = self.env.recorder
        state = None
        while True:
            current = self._common_state()
            if current != state:
                if state is not None:
                    self._end_phase(*state)
                epoch, phase = current
                if phase is not Phase.ORDERING:
                    if ordering_only:
                        return
                    if phase is Phase.EXPLORATION and (
                        epoch > self.n_epochs or (self.max_slots is not None and rec.t >= self.max_slots)
                    ):
                        self.truncated = epoch <= self.n_epochs
                        return
                rec.set_phase(0 if phase is Phase.ORDERING else epoch, phase.value)
                self._begin_phase(epoch, phase)
                state = current
            if self._try_skip(phase):
                continue
            signal = any(a.in_signal_window for a in self.agents)
            actions = [a.act() for a in self.agents]
            feedback, inc, collided = self.env.advance_slot(actions)
            if not signal and phase is not Phase.ORDERING:
                r = self.records[-1]
                if phase is Phase.EXPLORATION and collided:
                    r.exploration_collisions += 1
                elif phase is Phase.EXPLOITATION:
                    r.exploitation_regret_outside_windows += inc
            for a, f in zip(self.agents, feedback):
                a.observe(f)

    def _try_skip(self, phase: Phase) -> bool:
        plans = [a.quiet_plan() for a in self.agents]
        if any(p is None for p in plans):
            return False
        horizon = min(h for h, _ in plans)
        if horizon < 2:
            return False
        period = _lcm_period([pat for _, pat in plans])
        profiles = np.array([[pat[r % len(pat)] for _, pat in plans] for r in range(period)])
        for prof in profiles:
            used = prof[prof != IDLE]
            if len(used) != len(set(used.tolist())):
                return False
        incs = self.env.increments(profiles)
        self.env.recorder.add_periodic(incs, horizon)
        self.env.skip_rewards(horizon)
        if phase is Phase.EXPLOITATION:
            q, r = divmod(horizon, period)
            self.records[-1].exploitation_regret_outside_windows += q * float(incs.sum()) + float(incs[:r].sum())
        for a in self.agents:
            a.skip(horizon)
        return True

    def _begin_phase(self, epoch: int, phase: Phase) -> None:
        self._phase_t0 = self.env.t
        if phase is Phase.EXPLORATION:
            self.records.append(EpochRecord(epoch, c1=tuple(a.exploration.c1 for a in self.agents)))

    def _end_phase(self, epoch: int, phase: Phase) -> None:
        """Bookkeeping once every agent has left ``phase`` (read-only access)."""
        agents = self.agents
        length = self.env.t - self._phase_t0
        if phase is Phase.ORDERING:
            self.ordering_slots = length
            return
        r = self.records[-1]
        if phase is Phase.EXPLORATION:
            r.exploration_slots = length
            r.b_hat_max = max(a.b_hat for a in agents)
            r.delta_hat_min = min(a.delta_hat for a in agents)
        elif phase is Phase.MATCHING:
            r.matching_slots = length
            ms = agents[0].matching
            r.tau_min, r.tau_max, r.threshold_tests = ms.tau_min, ms.tau_max, ms.tests
            r.test_budget = threshold_test_budget(r.b_hat_max, r.delta_hat_min)
            r.assignment = tuple(a.exploitation.assignment for a in agents)
            r.fallback = agents[0].exploitation.fallback
            r.exploitation_base_min = min(a.exploitation.base for a in agents)
            r.exploitation_block = min(a.exploitation.length for a in agents)
            r.matched_optimal = _is_optimal(self.env, r.assignment)
        else:
            r.exploitation_slots = length


def _is_optimal(env: Environment, assignment) -> bool:
    return abs(assignment_value(env.model.means, assignment) - env.rho_star) <= OPTIMALITY_TOL


def _setup(cfg: SimulationConfig):
    model_rng, reward_rng, agent_rngs = _streams(cfg.seed, cfg.n_agents)
    model = _build_model(cfg, model_rng)
    env = Environment(model, reward_rng, cfg.checkpoint_stride)
    params = cfg.protocol_params()
    agents = [
        Agent(params, rng, agent_id=i, order=(i if cfg.skip_ordering else None))
        for i, rng in enumerate(agent_rngs)
    ]
    return env, agents


def run_simulation(config: SimulationConfig) -> SimulationResult:
    """Run ordering (unless skipped) and then ``config.epochs`` epochs."""
    config.validate()
    start = time.perf_counter()
    env, agents = _setup(config)
    driver = SlotDriver(env, agents, config.epochs, config.max_slots)
    if config.engine == "slot":
        driver.run()
        records, truncated = driver.records, driver.truncated
    else:
        driver.run(ordering_only=True)
        records, truncated = _run_fast_epochs(config, env, [a.order for a in agents])
    env.recorder.close()
    return SimulationResult(
        config=config,
        means=np.array(env.model.means),
        rho_star=env.rho_star,
        optimal_assignment=env.optimal_assignment,
        order=tuple(int(a.order) for a in agents),
        ordering_slots=driver.ordering_slots,
        trace=env.recorder.trace,
        epochs=records,
        total_slots=env.t,
        truncated=truncated,
        wall_time=time.perf_counter() - start,
    )


def run_ordering(config: SimulationConfig) -> tuple[tuple[int, ...], int]:
    """Only the ordering phase: (order index per agent, slots it took)."""
    config.validate()
    env, agents = _setup(config)
    driver = SlotDriver(env, agents, config.epochs)
    driver.run(ordering_only=True)
    return tuple(int(a.order) for a in agents), driver.ordering_slots


class MatchingSearch(NamedTuple):
    tau_min: float
    tau_max: float
    tests: int
    assignment: np.ndarray | None  # None if no threshold was ever feasible
    slots: int


def matching_search(means_hat, orders, delta, params: ProtocolParams, env: Environment | None = None) -> MatchingSearch:
    """Centralised replay of every agent's threshold search in one matching phase.

    ``means_hat[n]`` and ``delta[n]`` are agent n's own estimates. With ``env``
    the slots are charged to its regret trace and reward stream.
    """
    means_hat = np.asarray(means_hat, dtype=float)
    orders = np.asarray(orders, dtype=np.int64)
    delta = np.asarray(delta, dtype=float)
    n = len(orders)
    agent_by_order = np.argsort(orders)
    n_iter = auction_iterations(n)
    sweep = np.arange(n)
    true_means = env.model.means if env is not None else np.ones((n, n))
    rho_star = env.rho_star if env is not None else 1.0
    tau_min, tau_max, tau = 0.0, math.inf, 1.0
    doubling, saved, tests = True, None, 0
    while True:
        held, incs = kernels.distributed_auction(means_hat >= tau, agent_by_order, true_means, rho_star, n_iter)
        assigned = held >= 0
        notify = np.where(assigned[None, :], held[None, :], sweep[:, None])
        tests += 1
        if assigned.all():
            tau_min, saved = tau, held.copy()
        else:
            tau_max, doubling = tau, False
        tau = 2 * tau if doubling else 0.5 * (tau_min + tau_max)
        if tests >= params.max_threshold_tests:
            violators = np.zeros(n, dtype=bool)
        elif doubling or saved is None:
            violators = np.ones(n, dtype=bool)
        else:
            violators = (tau_max - tau_min) >= delta / 4
        if env is not None:
            stop = np.where(violators[None, :], sweep[:, None], orders[None, :])
            env.recorder.add_sequence(incs)
            env.recorder.add_sequence(env.increments(notify))
            env.recorder.add_sequence(env.increments(stop))
            env.skip_rewards(n_iter + 2 * n)
        if not violators.any():
            return MatchingSearch(tau_min, tau_max, tests, saved, tests * (n_iter + 2 * n))


def _run_fast_epochs(cfg: SimulationConfig, env: Environment, order) -> tuple[list[EpochRecord], bool]:
    n, L = cfg.n_agents, cfg.L
    p = cfg.protocol_params()
    rec = env.recorder
    model = env.model
    orders = np.asarray(order, dtype=np.int64)
    agent_idx = np.arange(n)
    means_hat = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=np.int64)
    maxs = np.zeros((n, n))
    b_hat = np.zeros(n)
    sweep = np.arange(n)
    records = []
    # round-robin profile at sampling slot s depends only on s % N
    rr_profiles = (orders[None, :] + sweep[:, None]) % n
    rr_incs = env.increments(rr_profiles)
    rr_collisions = sum(len(set(p_.tolist())) < n for p_ in rr_profiles)

    for k in range(1, cfg.epochs + 1):
        if cfg.max_slots is not None and rec.t >= cfg.max_slots:
            return records, True
        r = EpochRecord(k)
        records.append(r)

        # exploration
        rec.set_phase(k, Phase.EXPLORATION.value)
        t0 = rec.t
        c1 = np.array([exploration_length(k, b, L, p.exploration_rule, n) for b in b_hat], dtype=np.int64)
        r.c1 = tuple(int(c) for c in c1)
        block = L * n
        s0 = 0
        while True:
            u = env.rng.random((block, n))
            s = s0 + np.arange(block)
            arms = (orders[None, :] + s[:, None]) % n
            rewards = model.inverse_cdf(u, agent_idx[None, :], arms)
            kernels.explore_block(means_hat, counts, maxs, rewards, orders, s0, c1)
            rec.add_periodic(rr_incs, block)
            r.exploration_collisions += rr_collisions * L
            s0 += block
            unfinished = (s0 // n) < c1
            window = np.where(unfinished[None, :], sweep[:, None], orders[None, :])
            rec.add_sequence(env.increments(window))
            env.skip_rewards(n)
            if not unfinished.any():
                break
        r.exploration_slots = rec.t - t0
        b_hat = 2.0 * maxs.max(axis=1)
        r.b_hat_max = float(b_hat.max())

        # matching
        rec.set_phase(k, Phase.MATCHING.value)
        t0 = rec.t
        if n >= 2:
            srt = np.sort(means_hat, axis=1)
            delta = np.diff(srt, axis=1).min(axis=1)
        else:
            delta = np.full(n, math.inf)
        r.delta_hat_min = float(delta.min())
        search = matching_search(means_hat, orders, delta, p, env)
        r.matching_slots = rec.t - t0
        r.tau_min, r.tau_max, r.threshold_tests = search.tau_min, search.tau_max, search.tests
        r.test_budget = threshold_test_budget(r.b_hat_max, r.delta_hat_min)
        r.fallback = search.assignment is None
        assignment = orders.copy() if search.assignment is None else search.assignment
        r.assignment = tuple(int(a) for a in assignment)
        r.matched_optimal = _is_optimal(env, assignment)

        # exploitation
        rec.set_phase(k, Phase.EXPLOITATION.value)
        t0 = rec.t
        if p.exploitation_base is not None:
            bases = [p.exploitation_base] * n
        else:
            bases = [exploitation_base(d, L, p.c3_divisor) for d in delta]
        lengths = [exploitation_length(b, k, n) for b in bases]
        first = min(lengths)
        r.exploitation_base_min = float(min(bases))
        r.exploitation_block = first
        inc = env.increments(assignment[None, :])
        rec.add_periodic(inc, first)
        r.exploitation_regret_outside_windows = first * float(inc[0])
        sweepers = np.array([length == first for length in lengths])
        rec.add_sequence(env.increments(np.where(sweepers[None, :], sweep[:, None], assignment[None, :])))
        env.skip_rewards(first + n)
        r.exploitation_slots = rec.t - t0
    return records, False
