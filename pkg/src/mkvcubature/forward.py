"""Forward cubature tree with discrete McKean laws.

Each level stores node states, cumulative weights, the child table linking it to
the next level and the time expansion of the McKean terms
``F_i(t) = sum_p (t - T_k)^p / p! <mu_k, (L^mu_k)^p phi_i>``.  Without
recombination child ``j`` of node ``p`` sits at ``p * kappa + j``; with it,
nodes that land on the same point (within ``recombine_tol``) are merged and
their weights added.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cubature import CubatureFormula, ScaledPath
from .problem import Functional, FrozenCoefficients, ProblemDefinition
from .timegrid import TimeGrid

log = logging.getLogger(__name__)

DEFAULT_SUBSTEPS = 8
DEFAULT_NODE_BUDGET = 2 ** 22
NODE_BUDGET_ENV = "MKVCUB_NODE_BUDGET"
RECOMBINE_TOL = 1e-12


class IntegrationError(RuntimeError):
    pass


class NodeBudgetError(RuntimeError):
    pass


def node_budget() -> int:
    raw = os.environ.get(NODE_BUDGET_ENV)
    return int(raw) if raw else DEFAULT_NODE_BUDGET


def resolve_jobs(jobs: int) -> int:
    return os.cpu_count() or 1 if jobs == 0 else max(1, int(jobs))


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Read-only weighted point cloud ``sum_p w_p delta_{x_p}``."""

    states: np.ndarray
    weights: np.ndarray

    def integrate(self, g) -> float:
        return float(np.sum(self.weights * np.asarray(g(self.states), dtype=float)))

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class Expansion:
    """McKean arguments over one step, anchored at ``base_time``.

    ``coeffs[i, p]`` holds ``<mu, (L^mu)^p phi_i>``.  In measure mode
    ``coeffs`` is empty and every field receives ``measure`` instead.
    """

    base_time: float
    coeffs: np.ndarray
    measure: Optional[DiscreteMeasure] = None

    def args(self, t: float):
        if self.measure is not None:
            return (self.measure,) * self.coeffs.shape[0]
        if self.coeffs.shape[1] == 1:
            return tuple(self.coeffs[:, 0].tolist())
        dt = t - self.base_time
        powers = np.array([dt ** p / math.factorial(p) for p in range(self.coeffs.shape[1])])
        return tuple((self.coeffs @ powers).tolist())


@dataclass(frozen=True, eq=False)
class Level:
    k: int
    time: float
    states: np.ndarray
    weights: np.ndarray
    expansion: Expansion
    children: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.states, self.weights)


@dataclass(frozen=True, eq=False)
class CubatureTree:
    problem: ProblemDefinition
    formula: CubatureFormula
    grid: TimeGrid
    q: int
    levels: tuple
    recombined: bool = False

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def node_count(self) -> int:
        return sum(lv.size for lv in self.levels)

    def level(self, k: int) -> Level:
        if not 0 <= k <= self.N:
            raise IndexError(f"level {k} outside 0..{self.N}")
        return self.levels[k]


def level_measure(tree, k: int) -> DiscreteMeasure:
    return tree.level(k).measure


# -- generator ----------------------------------------------------------------

def generator_apply(problem: ProblemDefinition, measure: DiscreteMeasure, g: Functional,
                    p: int, t: float = 0.0) -> Functional:
    """``(L^mu)^p g`` with ``L g = V_0 . grad g + 1/2 Tr[V V^T D^2 g]``.

    Coefficients are frozen at time ``t`` and ``w_i = <measure, phi_i>``.  The
    first application uses the derivative oracles of ``g`` when present; nested
    applications fall back to finite differences.
    """
    if p < 0:
        raise ValueError("power must be non-negative")
    if not isinstance(g, Functional):
        g = Functional(g)
    if p == 0:
        return g
    ws = tuple(measure.integrate(phi) for phi in problem.mckean)
    frozen = FrozenCoefficients(problem, lambda _t: ws)
    d = problem.dimension

    def apply(h: Functional) -> Functional:
        def value(y):
            y = np.asarray(y, dtype=float)
            out = np.einsum("na,na->n", frozen.vector(0, t, y), h.gradient(y))
            hess = h.hessian(y)
            for k in range(1, d + 1):
                vk = frozen.vector(k, t, y)
                out = out + 0.5 * np.einsum("na,nab,nb->n", vk, hess, vk)
            return out
        return Functional(value)

    out = g
    for _ in range(p):
        out = apply(out)
    return out


def level_expansion(problem: ProblemDefinition, measure: DiscreteMeasure, q: int,
                    base_time: float) -> Expansion:
    if problem.measure_mode:
        return Expansion(base_time, np.zeros((problem.dimension + 1, 0)), measure)
    coeffs = np.empty((problem.dimension + 1, q))
    for i, phi in enumerate(problem.mckean):
        for p in range(q):
            coeffs[i, p] = measure.integrate(generator_apply(problem, measure, phi, p, base_time))
    return Expansion(base_time, coeffs)


# -- ODE along a cubature path -------------------------------------------------

def _rk4(frozen: FrozenCoefficients, x: np.ndarray, segments, substeps: int) -> np.ndarray:
    """RK4 along piecewise-linear controls.

    ``segments`` is a list of ``(t0, t1, slopes)`` where ``slopes`` has one row
    per state row (or a single row broadcast to all of them).
    """
    d = frozen.problem.dimension
    for t0, t1, slopes in segments:
        active = [k for k in range(d) if np.any(slopes[:, k] != 0.0)]
        cols = {k: slopes[:, k:k + 1] for k in active}

        def rhs(t, y):
            out = frozen.corrected_drift(t, y)
            for k in active:
                out = out + frozen.vector(k + 1, t, y) * cols[k]
            return out

        h = (t1 - t0) / substeps
        for s in range(substeps):
            t = t0 + s * h
            k1 = rhs(t, x)
            k2 = rhs(t + h / 2, x + h / 2 * k1)
            k3 = rhs(t + h / 2, x + h / 2 * k2)
            k4 = rhs(t + h, x + h * k3)
            x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def _path_segments(paths) -> list:
    """Segments shared by scaled paths with identical knot times, slopes stacked by path."""
    per_path = [list(p.segments()) for p in paths]
    out = []
    for pieces in zip(*per_path):
        t0, t1 = pieces[0][0], pieces[0][1]
        out.append((t0, t1, np.array([inc for _, _, inc in pieces]) / (t1 - t0)))
    return out


def _check_finite(out: np.ndarray, offset: int = 0):
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        raise IntegrationError(f"non-finite state after integration at node {offset + int(np.argmax(bad))}")


def integrate_node(problem: ProblemDefinition, start, path: ScaledPath, expansion: Expansion,
                   substeps: int = DEFAULT_SUBSTEPS) -> np.ndarray:
    """Solve ``dx = Vbar_0 dt + sum_k V_k d omega~^k`` along one scaled cubature path.

    ``start`` may be a single point ``(d,)`` or a batch ``(n, d)``.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    start = np.asarray(start, dtype=float)
    single = start.ndim == 1
    x = np.atleast_2d(start)
    frozen = FrozenCoefficients(problem, expansion.args)
    segments = _path_segments([path])
    if problem.state_independent:
        out = x + _rk4(frozen, np.zeros((1, problem.dimension)), segments, substeps)
    else:
        out = _rk4(frozen, x, segments, substeps)
    _check_finite(out)
    return out[0] if single else out


def advance_level(problem: ProblemDefinition, states: np.ndarray, paths, expansion: Expansion,
                  substeps: int, pool=None, jobs: int = 1) -> np.ndarray:
    """Children of every node along every path, shape ``(n, kappa, d)``."""
    n, d = states.shape
    kappa = len(paths)
    frozen = FrozenCoefficients(problem, expansion.args)
    times = {tuple(p.base.times) for p in paths}
    if len(times) != 1:
        return np.stack([integrate_node(problem, states, p, expansion, substeps) for p in paths], axis=1)
    segments = _path_segments(paths)
    if problem.state_independent:
        shift = _rk4(frozen, np.zeros((kappa, d)), segments, substeps)
        out = states[:, None, :] + shift[None, :, :]
        _check_finite(out.reshape(-1, d))
        return out

    def run(lo, hi):
        x = np.repeat(states[lo:hi], kappa, axis=0)
        segs = [(t0, t1, np.tile(sl, (hi - lo, 1))) for t0, t1, sl in segments]
        res = _rk4(frozen, x, segs, substeps)
        _check_finite(res, lo * kappa)
        return res.reshape(hi - lo, kappa, d)

    if pool is None or n < 2 * jobs:
        return run(0, n)
    bounds = np.linspace(0, n, jobs + 1).astype(int)
    parts = list(pool.map(lambda b: run(*b), zip(bounds[:-1], bounds[1:])))
    return np.concatenate(parts)


# -- tree ---------------------------------------------------------------------

def merge_nodes(states: np.ndarray, weights: np.ndarray, tol: float = RECOMBINE_TOL):
    """Merge nodes whose coordinates agree within ``tol``.

    Returns ``(states, weights, labels)`` where ``labels[r]`` is the merged
    index of raw node ``r``.  Clusters are ordered lexicographically and
    represented by their lowest raw index.
    """
    n, d = states.shape
    cid = np.zeros(n, dtype=np.int64)
    for c in range(d):
        order = np.lexsort((states[:, c], cid))
        vals = states[order, c]
        ids = cid[order]
        brk = np.empty(n, dtype=bool)
        brk[0] = True
        brk[1:] = (ids[1:] != ids[:-1]) | (np.diff(vals) > tol)
        new = np.empty(n, dtype=np.int64)
        new[order] = np.cumsum(brk) - 1
        cid = new
    count = int(cid.max()) + 1 if n else 0
    rep = np.full(count, n, dtype=np.int64)
    np.minimum.at(rep, cid, np.arange(n))
    merged_w = np.bincount(cid, weights=weights, minlength=count)
    return states[rep], merged_w, cid


def _prepare(problem, formula, grid, q, recombine, budget):
    if formula.dimension != problem.dimension:
        raise ValueError("formula and problem dimensions differ")
    if q < 1:
        raise ValueError("expansion order q must be >= 1")
    if problem.measure_mode and q != 1:
        warnings.warn("measure-mode coefficients support q = 1 only; using q = 1")
        q = 1
    if q > 2:
        warnings.warn(f"q = {q} nests finite-difference generators; expect reduced accuracy")
    budget = node_budget() if budget is None else budget
    kappa = formula.size
    if not recombine and kappa ** grid.N > budget:
        raise NodeBudgetError(f"{kappa}^{grid.N} nodes at the last level exceed the budget of {budget}")
    return q, budget


class _Stepper:
    """Generates level ``k + 1`` from level ``k``; pure given its inputs."""

    def __init__(self, problem, formula, grid, q, substeps, recombine, jobs, budget, recombine_tol):
        self.problem, self.formula, self.grid, self.q = problem, formula, grid, q
        self.substeps, self.recombine, self.budget = substeps, recombine, budget
        self.recombine_tol = recombine_tol
        self.jobs = resolve_jobs(jobs)
        self.pool = ThreadPoolExecutor(self.jobs) if self.jobs > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None

    def root(self) -> Level:
        states = self.problem.x0[None, :].copy()
        weights = np.ones(1)
        t0 = float(self.grid.points[0])
        return Level(0, t0, states, weights,
                     level_expansion(self.problem, DiscreteMeasure(states, weights), self.q, t0))

    def step(self, level: Level) -> tuple:
        """Return ``(children table of level, next level)``."""
        problem, formula, grid = self.problem, self.formula, self.grid
        k, n, kappa, d = level.k, level.size, formula.size, problem.dimension
        if n * kappa > self.budget:
            raise NodeBudgetError(f"level {k + 1} would hold {n * kappa} nodes, budget is {self.budget}")
        t, h = float(grid.points[k]), grid.step(k + 1)
        try:
            raw = advance_level(problem, level.states, formula.scaled(t, h), level.expansion,
                                self.substeps, self.pool, self.jobs)
        except IntegrationError as exc:
            raise IntegrationError(f"level {k} -> {k + 1}: {exc}") from None
        raw = raw.reshape(n * kappa, d)
        raw_w = (level.weights[:, None] * formula.weights[None, :]).reshape(-1)
        if self.recombine:
            states, weights, labels = merge_nodes(raw, raw_w, self.recombine_tol)
            children = labels.reshape(n, kappa).astype(np.int32)
        else:
            states, weights = raw, raw_w
            children = np.arange(n * kappa, dtype=np.int32).reshape(n, kappa)
        t_next = float(grid.points[k + 1])
        expansion = level_expansion(problem, DiscreteMeasure(states, weights), self.q, t_next)
        log.debug("level %d: %d nodes", k + 1, len(weights))
        return children, Level(k + 1, t_next, states, weights, expansion)


def _with_children(level: Level, children) -> Level:
    return Level(level.k, level.time, level.states, level.weights, level.expansion, children)


class CheckpointedTree:
    """Tree that keeps every ``stride``-th level and regenerates the rest on demand.

    Regeneration runs the same deterministic step from a stored checkpoint, so
    every level is bit-identical to the one a full :class:`CubatureTree` holds.
    Access is cheapest level by level in either direction.
    """

    def __init__(self, stepper: _Stepper, stride: int):
        self._stepper = stepper
        self.problem, self.formula, self.grid = stepper.problem, stepper.formula, stepper.grid
        self.q, self.recombined, self.stride = stepper.q, stepper.recombine, stride
        self._checkpoints = {}
        self._cache = OrderedDict()
        self.level_sizes = []
        level = stepper.root()
        for k in range(self.N):
            if k % stride == 0:
                self._checkpoints[k] = level
            self.level_sizes.append(level.size)
            _, level = stepper.step(level)
        self.level_sizes.append(level.size)
        self._last = level
        if self.N % stride == 0:
            self._checkpoints[self.N] = level

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def node_count(self) -> int:
        return int(sum(self.level_sizes))

    def level(self, k: int) -> Level:
        if not 0 <= k <= self.N:
            raise IndexError(f"level {k} outside 0..{self.N}")
        if k == self.N:
            return self._last
        start = (k // self.stride) * self.stride
        if start in self._cache:
            self._cache.move_to_end(start)
        else:
            # two segments cover a parent/child pair straddling a checkpoint
            while len(self._cache) >= 2:
                self._cache.popitem(last=False)
            self._cache[start] = self._segment(start)
        return self._cache[start][k - start]

    def _segment(self, start: int) -> list:
        level = self._checkpoints[start]
        out = []
        for k in range(start, min(start + self.stride, self.N)):
            children, nxt = self._stepper.step(level)
            out.append(_with_children(level, children))
            level = nxt
        return out

    def close(self):
        self._stepper.close()


def build_tree(problem: ProblemDefinition, formula: CubatureFormula, grid: TimeGrid, q: int = 1,
               substeps: int = DEFAULT_SUBSTEPS, recombine: bool = False, jobs: int = 1,
               budget: Optional[int] = None, recombine_tol: float = RECOMBINE_TOL,
               checkpoint: Optional[int] = None):
    """Build the cubature tree for ``problem`` on ``grid``.

    With ``checkpoint`` set to a stride ``S``, only every ``S``-th level is kept
    in memory (see :class:`CheckpointedTree`); otherwise all levels are stored.
    """
    q, budget = _prepare(problem, formula, grid, q, recombine, budget)
    stepper = _Stepper(problem, formula, grid, q, substeps, recombine, jobs, budget, recombine_tol)
    if checkpoint:
        return CheckpointedTree(stepper, int(checkpoint))
    try:
        levels = []
        level = stepper.root()
        for _ in range(grid.N):
            children, nxt = stepper.step(level)
            levels.append(_with_children(level, children))
            level = nxt
        levels.append(level)
    finally:
        stepper.close()
    return CubatureTree(problem, formula, grid, q, tuple(levels), recombine)
