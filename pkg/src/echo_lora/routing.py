"""Step-level Bernoulli routing of the echo path with a linearly decaying probability."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class RoutingSchedule:
    p_start: float = 1.0
    p_end: float = 0.2
    K: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_end <= self.p_start <= 1.0:
            raise ConfigError(f"need 0 <= p_end <= p_start <= 1, got "
                              f"p_start={self.p_start}, p_end={self.p_end}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")


def routing_prob(k: int, s: RoutingSchedule) -> float:
    """p_start + k/(K-1) * (p_end - p_start), written as a lerp so both ends are exact."""
    if not 0 <= k < s.K:
        raise UsageError(f"step {k} outside [0, {s.K})")
    if s.K == 1:
        return s.p_start
    frac = k / (s.K - 1)
    return (1.0 - frac) * s.p_start + frac * s.p_end


def sample_route(k: int, s: RoutingSchedule, rng: np.random.Generator) -> int:
    """One Bernoulli(p_k) draw; consumes exactly one uniform from ``rng``."""
    return int(rng.random() < routing_prob(k, s))


class Router:
    """Owns the routing stream so that routing draws never shift other randomness.

    ``force`` pins every draw to 0 or 1 while still advancing the stream.
    """

    def __init__(self, schedule: RoutingSchedule, force: int | None = None):
        if force not in (None, 0, 1):
            raise ConfigError(f"force must be None, 0 or 1, got {force}")
        self.schedule = schedule
        self.force = force
        self.rng = np.random.default_rng(schedule.rng_seed)

    def prob(self, k: int) -> float:
        return routing_prob(k, self.schedule)

    def sample(self, k: int) -> int:
        r = sample_route(k, self.schedule, self.rng)
        return r if self.force is None else self.force
