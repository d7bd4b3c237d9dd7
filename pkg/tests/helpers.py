"""Small drivers shared by the protocol and acceptance tests."""

import numpy as np

from fairbandit.model import RewardModel, realize_slot
from fairbandit.protocol import Agent, Phase, ProtocolParams, auction_iterations
from fairbandit.stats import ArmEstimate


def step(agents, model, rng):
    actions = [a.act() for a in agents]
    feedback = realize_slot(model, actions, rng)
    for a, f in zip(agents, feedback):
        a.observe(f)
    return actions, feedback


def run_until(agents, model, rng, done, max_slots=1_000_000):
    for t in range(max_slots):
        if done():
            return t
        step(agents, model, rng)
    raise AssertionError("did not finish")


def agents_in_matching(est_rows, order=None, **params):
    """Agents that just finished exploring with the given estimate rows."""
    est_rows = np.asarray(est_rows, dtype=float)
    n = len(est_rows)
    order = list(range(n)) if order is None else list(order)
    p = ProtocolParams(n, **params)
    agents = []
    for i in range(n):
        a = Agent(p, np.random.default_rng(i), agent_id=i, order=order[i])
        a.estimates = [ArmEstimate(float(v), 1, float(v)) for v in est_rows[i]]
        a._start_matching()
        agents.append(a)
    return agents


def agent_auction_verdict(adjacency, order):
    """Run one threshold test (tau = 1) through the agents' own state machines.

    Returns (feasible, held arm per agent or -1, slots used).
    """
    adjacency = np.asarray(adjacency, dtype=bool)
    n = len(adjacency)
    agents = agents_in_matching(np.where(adjacency, 1.0, 0.5), order)
    model = RewardModel(np.ones((n, n)))
    rng = np.random.default_rng(0)
    held = None
    slots = 0
    for _ in range(auction_iterations(n)):
        step(agents, model, rng)
        slots += 1
    held = [a.matching.auction.assigned_arm if a.matching.auction.assigned else -1 for a in agents]
    for _ in range(n):  # notification window
        step(agents, model, rng)
        slots += 1
    verdicts = {a.matching.tau_min == 1.0 for a in agents}
    assert len(verdicts) == 1, "agents disagree on the verdict"
    assert all(a.matching.tests == 1 for a in agents)
    return verdicts.pop(), held, slots


def in_phase(agents, phase):
    return all(a.phase is phase for a in agents)


__all__ = ["Phase", "step", "run_until", "agents_in_matching", "agent_auction_verdict", "in_phase"]
