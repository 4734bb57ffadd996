from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from .backward import BackwardField
from .forward import CubatureTree

DEFAULT_TAIL = 8


def forward_error(tree: CubatureTree, test_function, expected, mode: str = "per-level-max") -> float:
    """Weak error of the level measures against ``expected(T_k) = E g(X_{T_k})``."""
    if mode == "per-level-max":
        ks = range(tree.N + 1)
    elif mode == "terminal-only":
        ks = [tree.N]
    else:
        raise ValueError(f"unknown forward error mode {mode!r}")
    return max(abs(tree.level(k).measure.integrate(test_function) - expected(float(tree.grid.points[k])))
               for k in ks)


def _sqrt_step(tree: CubatureTree, k: int) -> float:
    # level 0 has no step ending at it; use the first step
    return math.sqrt(tree.grid.step(max(k, 1)))


class BackwardErrors:
    """Running maxima of the ``u`` and ``v`` node errors; usable as an ``on_level`` hook."""

    def __init__(self, tree: CubatureTree, u_exact, v_exact, levels: Optional[Sequence[int]] = None):
        self.tree = tree
        self.u_exact = u_exact
        self.v_exact = v_exact
        self.levels = set(range(max(tree.N - 1, 1)) if levels is None else levels)
        self.e_u = self.e_v = self.e_v_weighted = 0.0

    def __call__(self, k: int, u: np.ndarray, v: np.ndarray) -> None:
        if k not in self.levels:
            return
        lv = self.tree.level(k)
        t = float(self.tree.grid.points[k])
        self.e_u = max(self.e_u, float(np.max(np.abs(self.u_exact(t, lv.states) - u))))
        ev = float(np.max(np.abs(self.v_exact(t, lv.states) - v)))
        self.e_v = max(self.e_v, ev)
        self.e_v_weighted = max(self.e_v_weighted, ev * _sqrt_step(self.tree, k))


def backward_error(tree: CubatureTree, field: BackwardField, u_exact, v_exact,
                   v_weighting: str = "none", levels: Optional[Sequence[int]] = None):
    """``(E_u, E_v)``: max node errors over ``levels`` (default ``0..N-2``)."""
    if v_weighting not in ("none", "sqrt-step"):
        raise ValueError(f"unknown weighting {v_weighting!r}")
    acc = BackwardErrors(tree, u_exact, v_exact, levels)
    for k in sorted(acc.levels):
        acc(k, field.u[k], field.v[k])
    return acc.e_u, (acc.e_v if v_weighting == "none" else acc.e_v_weighted)


def fit_rate(points: Sequence[tuple], tail: int = DEFAULT_TAIL) -> float:
    """Least-squares slope of ``log(error)`` against ``log(1/N)`` over the last ``tail`` points."""
    if tail < 2:
        raise ValueError("need at least two points to fit a rate")
    pts = list(points)[-tail:]
    if len(pts) < 2:
        raise ValueError("need at least two points to fit a rate")
    n = np.array([p[0] for p in pts], dtype=float)
    err = np.array([p[1] for p in pts], dtype=float)
    if np.any(~(err > 0)) or np.any(~np.isfinite(err)):
        raise ValueError("errors must be positive and finite")
    x = np.log(1.0 / n)
    y = np.log(err)
    x = x - x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


@dataclass
class ErrorRecord:
    N: int
    forward_err: float
    E_u: float
    E_v: float
    E_v_weighted: float
    nodes: int
    seconds: float

    def as_dict(self):
        return asdict(self)


@dataclass
class ErrorReport:
    records: list

    def series(self, column: str):
        return [(r.N, getattr(r, column)) for r in self.records]

    def slope(self, column: str, tail: int = DEFAULT_TAIL) -> float:
        pts = [(n, e) for n, e in self.series(column) if np.isfinite(e)]
        return fit_rate(pts, min(tail, len(pts)))
