"""Environment semantics: reward model, collisions, slot realization, pseudo-regret.

Arms and agents are 0-indexed throughout. An agent that does not access any arm
in a slot plays ``IDLE``; its utility for that slot is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

IDLE = -1

FAMILIES = ("uniform", "triangular")


class SlotFeedback(NamedTuple):
    """What a single agent observes at the end of one slot."""

    reward: float
    no_collision: bool


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Ground-truth N x N mean rewards with bounded continuous sampling laws.

    ``means[n, m]`` is the expected reward of agent ``n`` on arm ``m`` and
    ``supports[n, m]`` the upper end of its support. Both default families are
    symmetric on (0, 2 * mean], so ``supports == 2 * means``.
    """

    means: np.ndarray
    family: str = "uniform"
    supports: np.ndarray = field(init=False)

    def __post_init__(self):
        means = np.array(self.means, dtype=float)
        if means.ndim != 2 or means.shape[0] != means.shape[1]:
            raise ValueError(f"means must be a square matrix, got shape {means.shape}")
        if means.shape[0] < 1:
            raise ValueError("need at least one agent")
        if not np.all(np.isfinite(means)) or np.any(means <= 0):
            raise ValueError("all mean rewards must be finite and positive")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown reward family {self.family!r}; choose from {FAMILIES}")
        means.setflags(write=False)
        supports = 2.0 * means
        supports.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "supports", supports)

    @property
    def n_agents(self) -> int:
        return self.means.shape[0]

    def inverse_cdf(self, u, agents, arms):
        """Map uniforms ``u`` in [0, 1) to rewards in (0, S] for the given entries.

        Shared by both simulation engines so that identical uniforms give
        bit-identical rewards.
        """
        support = self.supports[agents, arms]
        v = 1.0 - u  # (0, 1]
        if self.family == "uniform":
            return support * v
        # symmetric triangular on (0, S], mode S/2
        return np.where(
            v <= 0.5,
            support * np.sqrt(0.5 * v),
            support * (1.0 - np.sqrt(0.5 * (1.0 - v))),
        )


def latin_means(n: int, rng: np.random.Generator) -> np.ndarray:
    """Each agent's row is an independent random permutation of {k/N : k = 1..N}."""
    base = np.arange(1, n + 1) / n
    return np.stack([rng.permutation(base) for _ in range(n)])


def grid_means(n: int, rng: np.random.Generator) -> np.ndarray:
    """The values {i/N^2 : i = 1..N^2}, randomly permuted into an N x N matrix."""
    return rng.permutation(np.arange(1, n * n + 1) / (n * n)).reshape(n, n)


def collision_indicator(profile, n_arms: int | None = None) -> np.ndarray:
    """Per-arm indicator: 0 where two or more agents chose the arm, else 1."""
    profile = np.asarray(profile, dtype=np.int64)
    if n_arms is None:
        n_arms = len(profile)
    _check_profile(profile, n_arms)
    counts = np.bincount(profile[profile != IDLE], minlength=n_arms)
    return (counts <= 1).astype(np.int8)


def _check_profile(profile: np.ndarray, n_arms: int) -> None:
    if np.any((profile < IDLE) | (profile >= n_arms)):
        raise ValueError(f"action profile {profile.tolist()} has entries outside 0..{n_arms - 1}")


def realize_slot(model: RewardModel, profile, rng: np.random.Generator) -> list[SlotFeedback]:
    """Resolve one slot: collisions zero the reward, other agents draw a sample.

    Exactly ``N`` uniforms are consumed from ``rng`` per call, whatever the
    profile, so a stream can be fast-forwarded by ``N`` per skipped slot.
    """
    profile = np.asarray(profile, dtype=np.int64)
    n = model.n_agents
    if profile.shape != (n,):
        raise ValueError(f"expected {n} actions, got {profile.shape}")
    eta = collision_indicator(profile, n)
    u = rng.random(n)
    active = profile != IDLE
    arms = np.where(active, profile, 0)
    rewards = model.inverse_cdf(u, np.arange(n), arms)
    out = []
    for i in range(n):
        if not active[i]:
            out.append(SlotFeedback(0.0, True))
        elif eta[arms[i]]:
            out.append(SlotFeedback(float(rewards[i]), True))
        else:
            out.append(SlotFeedback(0.0, False))
    return out


def pseudo_regret_increment(model: RewardModel, rho_star: float, profile) -> float:
    """rho* minus the worst agent's collision-weighted expected reward."""
    return float(regret_increments(model.means, rho_star, np.asarray(profile)[None, :])[0])


def regret_increments(means: np.ndarray, rho_star: float, profiles: np.ndarray) -> np.ndarray:
    """Vectorised ``pseudo_regret_increment`` over a (slots, N) array of profiles."""
    profiles = np.asarray(profiles, dtype=np.int64)
    s, n = profiles.shape
    active = profiles != IDLE
    arms = np.where(active, profiles, 0)
    counts = np.zeros((s, n), dtype=np.int64)
    rows = np.repeat(np.arange(s), n)
    np.add.at(counts, (rows, arms.ravel()), active.ravel())
    clean = active & (np.take_along_axis(counts, arms, axis=1) == 1)
    utility = np.where(clean, means[np.arange(n)[None, :], arms], 0.0)
    return rho_star - utility.min(axis=1)
