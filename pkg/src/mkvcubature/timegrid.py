from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """``T_k = T * (1 - (1 - k/N)**gamma)``; ``gamma > 1`` refines towards ``T``."""

    T: float
    N: int
    gamma: float
    points: np.ndarray

    @property
    def steps(self) -> np.ndarray:
        """``steps[k-1]`` is the step ending at ``T_k``."""
        return np.diff(self.points)

    def step(self, k: int) -> float:
        """Length of the step ending at ``T_k`` (``k >= 1``)."""
        return float(self.points[k] - self.points[k - 1])


def make_grid(T: float, N: int, gamma: float = 1.0) -> TimeGrid:
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")
    if int(N) != N or N < 1:
        raise ValueError(f"step count must be a positive integer, got {N}")
    if not gamma >= 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    N = int(N)
    k = np.arange(N + 1)
    points = T * (1.0 - (1.0 - k / N) ** gamma)
    points[0] = 0.0
    points[-1] = T
    points.setflags(write=False)
    return TimeGrid(float(T), N, float(gamma), points)
