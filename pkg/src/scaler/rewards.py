"""Reward shaping for the scaling agent."""

from __future__ import annotations

import math
from typing import Sequence

from src.errors import DomainError


def reward_util(utils: Sequence[float], thresholds: Sequence[float]) -> float:
    """Mean absolute deviation of each machine's utilization from its
    threshold, plus one. Always >= 1; exactly 1 when every machine sits on
    its threshold."""
    if len(utils) == 0:
        raise DomainError("reward_util needs at least one machine")
    if len(utils) != len(thresholds):
        raise DomainError("one threshold per machine is required")
    for value in (*utils, *thresholds):
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"utilization {value} outside [0, 1]")
    deviation = sum(abs(u_max - u) for u, u_max in zip(utils, thresholds))
    return deviation / len(utils) + 1.0


def reward_rt(rt: float, rt_max: float) -> float:
    """1 while the response time meets ``rt_max``, then a Gaussian decay
    towards 0."""
    if not rt_max > 0:
        raise DomainError("RT_max must be positive")
    if not rt >= 0:
        raise DomainError("response time must be >= 0")
    if rt <= rt_max:
        return 1.0
    excess = (rt - rt_max) / rt_max
    # exp underflows to 0.0 for extreme overloads; keep the result in (0, 1]
    return max(math.exp(-(excess**2)), math.ulp(0.0))


def reward_total(r_q: float, r_u: float) -> float:
    if not r_u >= 1.0:
        raise DomainError("R_u must be >= 1")
    if not 0.0 < r_q <= 1.0:
        raise DomainError("R_q must lie in (0, 1]")
    return r_q / r_u
