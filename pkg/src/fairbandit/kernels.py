"""Compiled inner loops for the centralised (fast) engine.

Each kernel replays exactly what the per-agent state machine in ``protocol``
does, for all agents at once, so both engines make identical decisions.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def explore_block(means, counts, maxs, rewards, orders, s0, c1):
    """Round-robin sampling slots s0 .. s0 + len(rewards) - 1.

    Agent n plays arm (orders[n] + s) % N and updates its estimate only while
    its sweep index s // N is below its own per-arm target c1[n].
    """
    n_slots, n = rewards.shape
    for i in range(n_slots):
        s = s0 + i
        sweep = s // n
        for a in range(n):
            if sweep < c1[a]:
                m = (orders[a] + s) % n
                x = rewards[i, a]
                v = counts[a, m]
                means[a, m] = (v * means[a, m] + x) / (v + 1)
                counts[a, m] = v + 1
                if x > maxs[a, m]:
                    maxs[a, m] = x


@njit(cache=True)
def distributed_auction(adjacency, agent_by_order, true_means, rho_star, n_iter):
    """Collision-driven cardinality matching with per-agent local prices.

    Returns (arm held by each agent or -1, per-iteration pseudo-regret).
    In iteration t only the agent whose order index is t % N may bid; it takes
    its cheapest arm (lowest index on ties) and evicts any holder, who raises
    its own price for that arm by one.
    """
    n = adjacency.shape[0]
    prices = np.zeros((n, n))
    for a in range(n):
        for m in range(n):
            if not adjacency[a, m]:
                prices[a, m] = np.inf
    arm = np.full(n, -1, dtype=np.int64)
    holder = np.full(n, -1, dtype=np.int64)
    n_assigned = 0
    incs = np.empty(n_iter)
    for it in range(n_iter):
        j = agent_by_order[it % n]
        bid = -1
        if arm[j] < 0:
            best = np.inf
            for m in range(n):
                if prices[j, m] < best:
                    best = prices[j, m]
                    bid = m
        accessing = n_assigned + (1 if bid >= 0 else 0)
        if accessing < n or (bid >= 0 and holder[bid] >= 0):
            incs[it] = rho_star - 0.0
        else:
            worst = np.inf
            for a in range(n):
                m = bid if (a == j and bid >= 0) else arm[a]
                if true_means[a, m] < worst:
                    worst = true_means[a, m]
            incs[it] = rho_star - worst
        if bid >= 0:
            h = holder[bid]
            if h >= 0:
                arm[h] = -1
                prices[h, bid] += 1.0
                n_assigned -= 1
            arm[j] = bid
            holder[bid] = j
            n_assigned += 1
    return arm, incs
