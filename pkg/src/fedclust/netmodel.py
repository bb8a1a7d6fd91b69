"""Gaussian link-speed model and lockstep round timing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidParams


@dataclass(frozen=True)
class LinkModel:
    mean_speed: float = 1.4e6  # bits per second
    std_fraction: float = 0.10
    floor: float | None = None  # defaults to mean_speed / 10

    def __post_init__(self):
        if not self.mean_speed > 0:
            raise InvalidParams("mean_speed must be > 0")
        if not 0 <= self.std_fraction < 1:
            raise InvalidParams("std_fraction must lie in [0, 1)")
        if self.floor is not None and not self.floor > 0:
            raise InvalidParams("floor must be > 0")

    @property
    def min_speed(self) -> float:
        return self.mean_speed / 10 if self.floor is None else self.floor


def sample_speeds(lm: LinkModel, n: int, rng) -> np.ndarray:
    if n < 1:
        raise InvalidParams("n must be >= 1")
    draws = rng.normal(lm.mean_speed, lm.std_fraction * lm.mean_speed, size=n)
    return np.maximum(draws, lm.min_speed)


def phase_time(payload_bytes, speeds) -> float:
    """Seconds until the slowest client finishes: max over clients of 8*bytes/speed."""
    b = np.asarray(payload_bytes, dtype=np.float64)
    s = np.asarray(speeds, dtype=np.float64)
    if b.shape != s.shape:
        raise DimensionMismatch(f"{b.size} payloads but {s.size} speeds")
    if b.size == 0:
        return 0.0
    if not np.all(s > 0):
        raise InvalidParams("speeds must be positive")
    return float(np.max(8.0 * b / s))


def round_time(up_bytes, up_speeds, down_bytes, down_speeds) -> float:
    """Uplink phase (participants) followed by the downlink phase (all clients)."""
    return phase_time(up_bytes, up_speeds) + phase_time(down_bytes, down_speeds)
