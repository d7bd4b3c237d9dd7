"""Per-agent state machine for the max-min fair bandit protocol.

An agent only ever sees its own SlotFeedback. Everything it does is a function
of that history, its order index, its slot counters, its private RNG (used only
while ordering) and the shared protocol constants. ``agent_id`` is carried for
bookkeeping and never read by the protocol.

Each slot the driver calls ``act()`` on every agent, resolves the slot, then
calls ``observe()`` on every agent.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .model import IDLE, SlotFeedback
from .stats import (
    ArmEstimate,
    DEFAULT_C3_DIVISOR,
    agent_support_estimate,
    exploitation_base,
    exploitation_length,
    exploration_length,
    gap_estimate,
    update_running_mean,
)


class Phase(str, enum.Enum):
    ORDERING = "ordering"
    EXPLORATION = "exploration"
    MATCHING = "matching"
    EXPLOITATION = "exploitation"


class ProtocolError(AssertionError):
    """The act/observe contract or a protocol invariant was violated."""


@dataclass(frozen=True)
class ProtocolParams:
    n_agents: int
    L: int = 100
    beta: int = 4
    c3_divisor: float = DEFAULT_C3_DIVISOR
    exploitation_base: float | None = None  # fixed base instead of the gap-derived one
    exploration_rule: str = "formula"
    max_threshold_tests: int = 64

    def __post_init__(self):
        if self.n_agents < 1 or self.L < 1 or self.beta < 1:
            raise ValueError("n_agents, L and beta must be positive")
        if self.exploitation_base is not None and not self.exploitation_base >= 1:
            raise ValueError("a fixed exploitation base must be >= 1")
        if self.max_threshold_tests < 1:
            raise ValueError("max_threshold_tests must be positive")


def ordering_block_length(n: int, beta: int = 4) -> int:
    """Type-0/type-1 slots per ordering round, 2 * ceil(beta * N * log2 N)."""
    return 2 * max(1, math.ceil(beta * n * math.log2(n))) if n > 1 else 2


def auction_iterations(n: int) -> int:
    """Worst-case distributed auction length N^2 (N - 1); one slot when N = 1."""
    return max(1, n * n * (n - 1))


def threshold_test_budget(b_hat: float, min_delta_hat: float) -> float:
    """Doubling plus bisection steps needed to shrink the threshold interval
    below min(delta_hat)/4, with supports bounded by ``b_hat``."""
    b = max(1.0, b_hat)
    if min_delta_hat <= 0:
        return math.inf
    if math.isinf(min_delta_hat):
        return math.ceil(math.log2(2 * b)) + 1
    return math.ceil(math.log2(2 * b)) + max(0, math.ceil(math.log2(4 * b / min_delta_hat))) + 1


@dataclass
class AuctionState:
    prices: list[float]
    assigned: bool = False
    assigned_arm: int | None = None
    iteration: int = 0


@dataclass
class MatchingSearchState:
    tau_min: float = 0.0
    tau_max: float = math.inf
    tau: float = 1.0
    doubling_active: bool = True
    infeasible_seen: bool = False
    auction: AuctionState | None = None
    saved_assignment: int | None = None
    tests: int = 0
    stage: str = "auction"  # auction -> notify -> stop
    window_pos: int = 0
    window_collision: bool = False


@dataclass
class _Ordering:
    block: int
    available: list[bool]
    pos: int = 0
    assigned: bool = False
    arm: int | None = None
    probe: int | None = None
    reprobe: bool = False
    window_collision: bool = False


@dataclass
class _Exploration:
    c1: int
    s: int = 0  # sampling slots elapsed this epoch
    in_window: bool = False
    window_pos: int = 0
    window_collision: bool = False


@dataclass
class _Exploitation:
    assignment: int
    length: int
    base: float
    fallback: bool
    mode: str = "exploit"  # exploit -> sweep | wait
    pos: int = 0
    remaining: int = 0


@dataclass(eq=False)
class Agent:
    """One agent's private state and its slot-level behaviour."""

    params: ProtocolParams
    rng: np.random.Generator
    agent_id: int | None = None
    order: int | None = None
    phase: Phase = field(init=False)
    epoch: int = field(init=False, default=0)
    estimates: list[ArmEstimate] = field(init=False)
    b_hat: float = field(init=False, default=0.0)
    delta_hat: float = field(init=False, default=math.inf)
    matching: MatchingSearchState | None = field(init=False, default=None)

    def __post_init__(self):
        n = self.params.n_agents
        self.estimates = [ArmEstimate() for _ in range(n)]
        self._pending = False
        self._last_action = IDLE
        self._was_assigned = False
        self._bid = None
        self._ord = self._expl = self._exploit = None
        if self.order is None:
            self.phase = Phase.ORDERING
            self._ord = _Ordering(ordering_block_length(n, self.params.beta), [True] * n)
        else:
            if not 0 <= self.order < n:
                raise ValueError("order index out of range")
            self._start_epoch(1)

    # -- public slot interface -------------------------------------------------

    def act(self) -> int:
        if self._pending:
            raise ProtocolError("act() called twice without observe()")
        self._pending = True
        self._last_action = getattr(self, "_act_" + self.phase.value)()
        return self._last_action

    def observe(self, feedback: SlotFeedback) -> None:
        if not self._pending:
            raise ProtocolError("observe() without a preceding act()")
        self._pending = False
        getattr(self, "_observe_" + self.phase.value)(feedback)

    @property
    def n(self) -> int:
        return self.params.n_agents

    @property
    def mean_estimates(self) -> np.ndarray:
        return np.array([e.mean_estimate for e in self.estimates])

    @property
    def in_signal_window(self) -> bool:
        if self.phase is Phase.ORDERING:
            return self._ord.pos >= self._ord.block
        if self.phase is Phase.EXPLORATION:
            return self._expl.in_window
        if self.phase is Phase.MATCHING:
            return self.matching.stage != "auction"
        return self._exploit.mode != "exploit"

    @property
    def exploitation(self) -> _Exploitation | None:
        return self._exploit

    @property
    def exploration(self) -> _Exploration | None:
        return self._expl

    def quiet_plan(self) -> tuple[int, tuple[int, ...]] | None:
        """(horizon, periodic action pattern) over which this agent ignores
        feedback, provided its arm stays collision-free. None if not quiet."""
        if self.phase is Phase.ORDERING:
            o = self._ord
            if o.assigned and o.pos < o.block:
                pattern = (o.arm, IDLE) if o.pos % 2 == 0 else (IDLE, o.arm)
                return o.block - o.pos, pattern
        elif self.phase is Phase.EXPLOITATION:
            x = self._exploit
            if x.mode == "exploit":
                return x.length - x.pos, (x.assignment,)
        return None

    def skip(self, slots: int) -> None:
        """Advance through ``slots`` quiet, collision-free slots at once."""
        plan = self.quiet_plan()
        if plan is None or not 0 < slots <= plan[0] or self._pending:
            raise ProtocolError("skip() outside a quiet stretch")
        if self.phase is Phase.ORDERING:
            self._ord.pos += slots
        else:
            self._exploit.pos += slots
            if self._exploit.pos == self._exploit.length:
                self._exploit.mode = "sweep"
                self._exploit.remaining = 0

    # -- ordering --------------------------------------------------------------

    def _act_ordering(self) -> int:
        o = self._ord
        if o.pos >= o.block:  # verification window
            return o.arm if o.assigned else o.pos - o.block
        if o.pos % 2 == 0:
            if o.assigned:
                return o.arm
            choices = [m for m in range(self.n) if o.available[m]]
            o.probe = choices[int(self.rng.integers(len(choices)))]
            return o.probe
        return o.probe if o.reprobe else IDLE

    def _observe_ordering(self, fb: SlotFeedback) -> None:
        o = self._ord
        if o.pos >= o.block:
            if o.assigned and not fb.no_collision:
                o.window_collision = True
            o.pos += 1
            if o.pos == o.block + self.n:
                if o.assigned and not o.window_collision:
                    self.order = o.arm
                    self._ord = None
                    self._start_epoch(1)
                    return
                o.pos = 0
                o.window_collision = False
                o.reprobe = False
            return
        if o.pos % 2 == 0:
            if not o.assigned:
                if fb.no_collision:
                    o.assigned, o.arm = True, o.probe
                else:
                    o.reprobe = True
        elif o.reprobe:
            if fb.no_collision:
                # the type-0 collision was with an agent that already owns the arm
                o.available[o.probe] = False
            o.reprobe = False
        o.pos += 1

    # -- epochs ----------------------------------------------------------------

    def _start_epoch(self, k: int) -> None:
        self.epoch = k
        self.phase = Phase.EXPLORATION
        self._exploit = None
        p = self.params
        c1 = exploration_length(k, self.b_hat, p.L, p.exploration_rule, self.n)
        self._expl = _Exploration(c1)

    def _unfinished(self) -> bool:
        return self._expl.s // self.n < self._expl.c1

    def _act_exploration(self) -> int:
        e = self._expl
        if e.in_window:
            return e.window_pos if self._unfinished() else self.order
        return (self.order + e.s) % self.n

    def _observe_exploration(self, fb: SlotFeedback) -> None:
        e = self._expl
        n = self.n
        if not e.in_window:
            if not fb.no_collision:
                raise ProtocolError("collision during exploration sampling")
            if e.s // n < e.c1:
                arm = self._last_action
                self.estimates[arm] = update_running_mean(self.estimates[arm], fb.reward)
            e.s += 1
            if e.s % (self.params.L * n) == 0:
                e.in_window, e.window_pos, e.window_collision = True, 0, False
            return
        unfinished = self._unfinished()
        if not unfinished and not fb.no_collision:
            e.window_collision = True
        e.window_pos += 1
        if e.window_pos == n:
            if unfinished or e.window_collision:
                e.in_window = False
            else:
                self.b_hat = agent_support_estimate(self.estimates)
                self._start_matching()

    # -- matching --------------------------------------------------------------

    def _start_matching(self) -> None:
        self.phase = Phase.MATCHING
        self.delta_hat = gap_estimate(self.mean_estimates) if self.n >= 2 else math.inf
        self.matching = MatchingSearchState()
        self._start_auction()

    def _start_auction(self) -> None:
        ms = self.matching
        prices = [0.0 if e.mean_estimate >= ms.tau else math.inf for e in self.estimates]
        ms.auction = AuctionState(prices)
        ms.stage = "auction"

    def _violates_stopping(self) -> bool:
        ms = self.matching
        if ms.tests >= self.params.max_threshold_tests:
            return False
        if ms.doubling_active or ms.saved_assignment is None:
            return True
        return ms.tau_max - ms.tau_min >= self.delta_hat / 4

    def _act_matching(self) -> int:
        ms = self.matching
        a = ms.auction
        if ms.stage == "auction":
            self._was_assigned = a.assigned
            self._bid = None
            if a.assigned:
                return a.assigned_arm
            if a.iteration % self.n == self.order:
                best = min(range(self.n), key=a.prices.__getitem__)  # lowest index on ties
                if a.prices[best] < math.inf:
                    self._bid = best
                    return best
            return IDLE
        if ms.stage == "notify":
            return a.assigned_arm if a.assigned else ms.window_pos
        return ms.window_pos if self._violates_stopping() else self.order

    def _observe_matching(self, fb: SlotFeedback) -> None:
        ms = self.matching
        a = ms.auction
        n = self.n
        if ms.stage == "auction":
            if self._was_assigned:
                if not fb.no_collision:  # evicted by a bidder
                    a.prices[a.assigned_arm] += 1
                    a.assigned, a.assigned_arm = False, None
            elif self._bid is not None:
                a.assigned, a.assigned_arm = True, self._bid
            a.iteration += 1
            if a.iteration == auction_iterations(n):
                ms.stage, ms.window_pos, ms.window_collision = "notify", 0, False
            return
        if ms.stage == "notify":
            if a.assigned and not fb.no_collision:
                ms.window_collision = True
            ms.window_pos += 1
            if ms.window_pos < n:
                return
            ms.tests += 1
            if a.assigned and not ms.window_collision:
                ms.tau_min, ms.saved_assignment = ms.tau, a.assigned_arm
            else:
                ms.tau_max, ms.doubling_active, ms.infeasible_seen = ms.tau, False, True
            ms.tau = 2 * ms.tau if ms.doubling_active else 0.5 * (ms.tau_min + ms.tau_max)
            ms.stage, ms.window_pos, ms.window_collision = "stop", 0, False
            return
        violator = self._violates_stopping()
        if not violator and not fb.no_collision:
            ms.window_collision = True
        ms.window_pos += 1
        if ms.window_pos < n:
            return
        if violator or ms.window_collision:
            self._start_auction()
        else:
            self._start_exploitation()

    # -- exploitation ----------------------------------------------------------

    def _start_exploitation(self) -> None:
        p = self.params
        ms = self.matching
        self.phase = Phase.EXPLOITATION
        if p.exploitation_base is not None:
            base = p.exploitation_base
        else:
            base = exploitation_base(self.delta_hat, p.L, p.c3_divisor)
        fallback = ms.saved_assignment is None
        arm = self.order if fallback else ms.saved_assignment
        # lengths are whole frames of N slots so that every agent still
        # exploiting is reached by the earliest finisher's sweep first
        self._exploit = _Exploitation(arm, exploitation_length(base, self.epoch, self.n), base, fallback)

    def _act_exploitation(self) -> int:
        x = self._exploit
        return x.remaining if x.mode == "sweep" else x.assignment

    def _observe_exploitation(self, fb: SlotFeedback) -> None:
        x = self._exploit
        n = self.n
        if x.mode == "exploit":
            if not fb.no_collision:
                # someone's sweep reached our arm; wait for the rest of its window
                x.mode, x.remaining = "wait", n - 1 - x.pos % n
                if x.remaining == 0:
                    self._start_epoch(self.epoch + 1)
                return
            x.pos += 1
            if x.pos == x.length:
                x.mode, x.remaining = "sweep", 0
        elif x.mode == "sweep":
            x.remaining += 1  # doubles as the sweep position
            if x.remaining == n:
                self._start_epoch(self.epoch + 1)
        else:
            x.remaining -= 1
            if x.remaining == 0:
                self._start_epoch(self.epoch + 1)
