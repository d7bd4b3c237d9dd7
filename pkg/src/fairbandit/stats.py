"""Per-agent estimation: running means, support upper bounds, gaps, phase lengths."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_C3_DIVISOR = 32.0
EXPLOITATION_BASE_CAP = 2.0


@dataclass(frozen=True)
class ArmEstimate:
    mean_estimate: float = 0.0
    visit_count: int = 0
    max_sample: float = 0.0


def update_running_mean(est: ArmEstimate, sample: float) -> ArmEstimate:
    if not sample > 0:
        raise ValueError(f"samples must be positive, got {sample!r}")
    v = est.visit_count
    # same operation order as the batch kernel in ``kernels``
    mean = (v * est.mean_estimate + sample) / (v + 1)
    return ArmEstimate(mean, v + 1, max(est.max_sample, sample))


def support_ucb(max_sample: float) -> float:
    """Twice the largest sample seen: an upper bound on the support w.h.p."""
    if max_sample < 0:
        raise ValueError("max_sample must be nonnegative")
    return 2.0 * max_sample


def agent_support_estimate(estimates) -> float:
    """Aggregate support bound over all of an agent's arms."""
    return support_ucb(max((e.max_sample for e in estimates), default=0.0))


def exploration_length(k: int, b_hat_prev: float, L: int, rule: str = "formula", n_arms: int = 1) -> int:
    """Samples per arm in the exploration of epoch ``k``.

    ``rule="formula"``: ceil(L * B^2 + L).
    ``rule="pseudocode"``: the listing variant, (B * M + 1) rounds of L slots
    spread over M arms, i.e. ceil((B * M + 1) * L / M) samples per arm.
    """
    if k < 1:
        raise ValueError("epochs are numbered from 1")
    if b_hat_prev < 0 or L < 1:
        raise ValueError("need b_hat_prev >= 0 and L >= 1")
    if rule == "formula":
        return math.ceil(L * b_hat_prev * b_hat_prev + L)
    if rule == "pseudocode":
        return max(1, math.ceil((b_hat_prev * n_arms + 1) * L / n_arms))
    raise ValueError(f"unknown exploration rule {rule!r}")


def gap_estimate(row) -> float:
    """Smallest absolute difference between two entries of ``row``."""
    row = np.asarray(row, dtype=float)
    if row.ndim != 1 or len(row) < 2:
        raise ValueError("gap_estimate needs a row of length >= 2")
    return float(np.diff(np.sort(row)).min())


def exploitation_base(delta_hat: float, L: int, divisor: float = DEFAULT_C3_DIVISOR) -> float:
    """min(2, exp(L * gap^2 / divisor))."""
    if delta_hat < 0:
        raise ValueError("delta_hat must be nonnegative")
    exponent = L * delta_hat * delta_hat / divisor
    if exponent >= math.log(EXPLOITATION_BASE_CAP):
        return EXPLOITATION_BASE_CAP
    return min(EXPLOITATION_BASE_CAP, math.exp(exponent))


def exploitation_length(base: float, k: int, frame: int = 1) -> int:
    """max(1, floor(base^k)), rounded up to a whole number of ``frame`` slots."""
    length = max(1, math.floor(base**k))
    return -(-length // frame) * frame
