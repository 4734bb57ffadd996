"""Backward sweeps over a cubature tree.

The McKean driver term ``F(T_{k+1}) = <mu_{k+1}, phi_f(., u(T_{k+1}, .))>`` is
evaluated from the already known level ``k + 1`` before level ``k`` is swept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .cubature import path_increment_integrals, ScaledPath
from .forward import CubatureTree, Level

ORACLE_LIMIT = 4096


@dataclass(frozen=True, eq=False)
class BackwardField:
    """``u`` and ``v`` per tree level, aligned with the level nodes."""

    order: int
    u: tuple
    v: tuple
    f_bar: np.ndarray


def driver_mckean(problem, states: np.ndarray, weights: np.ndarray, u_level: np.ndarray) -> float:
    """``sum_p Lambda_p phi_f(X_p, u_p)``."""
    return float(np.sum(weights * problem.driver_functional(states, u_level)))


def _terminal(tree: CubatureTree, terminal_v: Optional[Callable]):
    problem = tree.problem
    last = tree.level(tree.N)
    u_n = np.asarray(problem.terminal(last.states), dtype=float)
    if terminal_v is None:
        v_n = np.zeros_like(last.states)
    else:
        v_n = np.asarray(terminal_v(last.states), dtype=float)
    return u_n, v_n


def _first_order_step(tree: CubatureTree, k: int, u_next: np.ndarray, f_next: float):
    problem = tree.problem
    formula = tree.formula
    level: Level = tree.level(k)
    child_states = tree.level(k + 1).states
    dt = tree.grid.step(k + 1)
    lam = formula.weights
    incr = math.sqrt(dt) * formula.endpoints
    C = level.children
    uc = u_next[C]
    v = (uc * lam) @ incr / dt
    t_next = float(tree.grid.points[k + 1])
    u = np.zeros(level.size)
    for j in range(formula.size):
        fj = problem.driver(t_next, child_states[C[:, j]], uc[:, j], v, f_next)
        u = u + lam[j] * (uc[:, j] + dt * fj)
    return u, v


def solve_first_order(tree: CubatureTree, terminal_v: Optional[Callable] = None,
                      on_level: Optional[Callable] = None, keep: bool = True) -> BackwardField:
    """Explicit first-order scheme; ``terminal_v`` optionally initialises ``v`` at ``T``.

    ``on_level(k, u, v)`` is called for every level as soon as it is known.  With
    ``keep=False`` only the values still needed by the sweep are retained, which
    is what convergence studies on large recombined trees use.
    """
    problem = tree.problem
    N = tree.N
    u_levels = [None] * (N + 1)
    v_levels = [None] * (N + 1)
    f_bar = np.empty(N + 1)
    u_levels[N], v_levels[N] = _terminal(tree, terminal_v)
    _emit(on_level, N, u_levels, v_levels)
    last = tree.level(N)
    f_bar[N] = driver_mckean(problem, last.states, last.weights, u_levels[N])
    for k in range(N - 1, -1, -1):
        u_levels[k], v_levels[k] = _first_order_step(tree, k, u_levels[k + 1], f_bar[k + 1])
        lv = tree.level(k)
        f_bar[k] = driver_mckean(problem, lv.states, lv.weights, u_levels[k])
        _emit(on_level, k, u_levels, v_levels)
        if not keep:
            u_levels[k + 1] = v_levels[k + 1] = None
    return BackwardField(1, tuple(u_levels), tuple(v_levels), f_bar)


def _emit(on_level, k, u_levels, v_levels):
    if on_level is not None:
        on_level(k, u_levels[k], v_levels[k])


def zeta_weights(formula, t: float, dt: float) -> np.ndarray:
    """``4 incr / dt - 6 int (s - t) d omega~ / dt^2`` for every path, shape ``(kappa, d)``."""
    rows = []
    for base in formula.paths:
        incr, tw = path_increment_integrals(ScaledPath(base, t, dt))
        rows.append(4.0 * incr / dt - 6.0 * tw / dt ** 2)
    return np.array(rows)


def solve_second_order(tree: CubatureTree, terminal_v: Optional[Callable] = None,
                       on_level: Optional[Callable] = None, keep: bool = True) -> BackwardField:
    """Predictor-corrector scheme; levels ``N`` and ``N - 1`` come from the first-order step."""
    problem = tree.problem
    formula = tree.formula
    N = tree.N
    if N < 2:
        raise ValueError("the second-order scheme needs N >= 2")
    lam = formula.weights
    u_levels = [None] * (N + 1)
    v_levels = [None] * (N + 1)
    f_bar = np.empty(N + 1)
    u_levels[N], v_levels[N] = _terminal(tree, terminal_v)
    _emit(on_level, N, u_levels, v_levels)
    last = tree.level(N)
    f_bar[N] = driver_mckean(problem, last.states, last.weights, u_levels[N])
    u_levels[N - 1], v_levels[N - 1] = _first_order_step(tree, N - 1, u_levels[N], f_bar[N])
    lv = tree.level(N - 1)
    f_bar[N - 1] = driver_mckean(problem, lv.states, lv.weights, u_levels[N - 1])
    _emit(on_level, N - 1, u_levels, v_levels)
    if not keep:
        u_levels[N] = v_levels[N] = None

    for k in range(N - 2, -1, -1):
        level = tree.level(k)
        child_states = tree.level(k + 1).states
        t, t_next = float(tree.grid.points[k]), float(tree.grid.points[k + 1])
        dt = tree.grid.step(k + 1)
        C = level.children
        uc = u_levels[k + 1][C]
        zeta = zeta_weights(formula, t, dt)
        f_child = np.empty_like(uc)
        for j in range(formula.size):
            idx = C[:, j]
            f_child[:, j] = problem.driver(t_next, child_states[idx], uc[:, j],
                                           v_levels[k + 1][idx], f_bar[k + 1])
        a = uc + dt * f_child
        v = (a * lam) @ zeta
        u_pred = a @ lam
        f_pred = driver_mckean(problem, level.states, level.weights, u_pred)
        f_corr = problem.driver(t, level.states, u_pred, v, f_pred)
        u = np.zeros(level.size)
        for j in range(formula.size):
            u = u + lam[j] * (uc[:, j] + 0.5 * dt * (f_child[:, j] + f_corr))
        u_levels[k], v_levels[k] = u, v
        f_bar[k] = driver_mckean(problem, level.states, level.weights, u)
        _emit(on_level, k, u_levels, v_levels)
        if not keep:
            u_levels[k + 1] = v_levels[k + 1] = None
    return BackwardField(2, tuple(u_levels), tuple(v_levels), f_bar)


def solve(tree: CubatureTree, order: int, terminal_v: Optional[Callable] = None, **kwargs) -> BackwardField:
    if order == 1:
        return solve_first_order(tree, terminal_v, **kwargs)
    if order == 2:
        return solve_second_order(tree, terminal_v, **kwargs)
    raise ValueError(f"scheme order must be 1 or 2, got {order}")


def enumerate_oracle(tree: CubatureTree, order: int = 1) -> BackwardField:
    """First-order recursion by explicit nested summation over multi-indices.

    Works node by node on path tuples ``(j_1, ..., j_k)`` and never touches the
    child tables; only meant for tiny, unrecombined trees.
    """
    if order != 1:
        raise ValueError("the enumeration oracle covers the first-order scheme only")
    kappa, N = tree.formula.size, tree.N
    if tree.recombined:
        raise ValueError("the enumeration oracle needs an unrecombined tree")
    if kappa ** N > ORACLE_LIMIT:
        raise ValueError(f"{kappa}^{N} leaves exceed the oracle limit of {ORACLE_LIMIT}")
    problem = tree.problem
    lam = [float(w) for w in tree.formula.weights]
    ends = [np.asarray(p.endpoint, dtype=float) for p in tree.formula.paths]

    def flat(path):
        idx = 0
        for j in path:
            idx = idx * kappa + j
        return idx

    def state(path):
        return tree.level(len(path)).states[flat(path)][None, :]

    def weight(path):
        w = 1.0
        for j in path:
            w *= lam[j]
        return w

    def paths_of(k):
        out = [()]
        for _ in range(k):
            out = [p + (j,) for p in out for j in range(kappa)]
        return out

    u, v = {}, {}
    d = problem.dimension
    for p in paths_of(N):
        u[p] = float(problem.terminal(state(p))[0])
        v[p] = np.zeros(d)
    f_next = 0.0
    for p in paths_of(N):
        f_next += weight(p) * float(problem.driver_functional(state(p), np.array([u[p]]))[0])
    f_bar = [0.0] * (N + 1)
    f_bar[N] = f_next
    for k in range(N - 1, -1, -1):
        dt = float(tree.grid.points[k + 1] - tree.grid.points[k])
        t_next = float(tree.grid.points[k + 1])
        for p in paths_of(k):
            vp = np.zeros(d)
            for j in range(kappa):
                vp = vp + lam[j] * u[p + (j,)] * math.sqrt(dt) * ends[j]
            vp = vp / dt
            total = 0.0
            for j in range(kappa):
                c = p + (j,)
                fj = float(problem.driver(t_next, state(c), np.array([u[c]]), vp[None, :], f_bar[k + 1])[0])
                total += lam[j] * (u[c] + dt * fj)
            u[p], v[p] = total, vp
        f_bar[k] = sum(weight(p) * float(problem.driver_functional(state(p), np.array([u[p]]))[0])
                       for p in paths_of(k))
    u_levels = tuple(np.array([u[p] for p in paths_of(k)]) for k in range(N + 1))
    v_levels = tuple(np.array([v[p] for p in paths_of(k)]) for k in range(N + 1))
    return BackwardField(1, u_levels, v_levels, np.array(f_bar))
