"""Decentralised max-min fair multi-player bandits: protocol, simulator, harness."""

__version__ = "0.1.0"

from .model import IDLE, RewardModel, collision_indicator, pseudo_regret_increment, realize_slot
from .oracle import has_perfect_matching, maxmin_bruteforce, maxmin_by_bisection, maxmin_exact, min_gap, threshold_graph
from .protocol import Agent, Phase, ProtocolParams
from .sim import SimulationConfig, SimulationResult, run_simulation

__all__ = [
    "IDLE",
    "Agent",
    "Phase",
    "ProtocolParams",
    "RewardModel",
    "SimulationConfig",
    "SimulationResult",
    "collision_indicator",
    "has_perfect_matching",
    "maxmin_bruteforce",
    "maxmin_by_bisection",
    "maxmin_exact",
    "min_gap",
    "pseudo_regret_increment",
    "realize_slot",
    "run_simulation",
    "threshold_graph",
]
