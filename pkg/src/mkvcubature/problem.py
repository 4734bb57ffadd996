"""Problem definitions for decoupled McKean-Vlasov FBSDEs.

All user functions are vectorised over nodes: states ``y`` have shape
``(n, d)``, scalar outputs shape ``(n,)`` and vector outputs ``(n, d)``.
The McKean argument ``w`` of a coefficient is a plain float (the value of
``<mu, phi_i>``), or a :class:`~mkvcubature.forward.DiscreteMeasure` for
problems given in measure mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erfc

EPS = np.finfo(float).eps
JAC_STEP = EPS ** (1.0 / 3.0)
HESS_STEP = EPS ** 0.25

Field = Callable[[float, np.ndarray, object], np.ndarray]


@dataclass(frozen=True)
class Functional:
    """Scalar test function on ``R^d`` with optional derivative oracles."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, y):
        return self.value(y)

    def gradient(self, y):
        return self.grad(y) if self.grad is not None else fd_gradient(self.value, y)

    def hessian(self, y):
        return self.hess(y) if self.hess is not None else fd_hessian(self.value, y)


def _fd_steps(y, base):
    return base * np.maximum(1.0, np.abs(y))


def fd_gradient(g, y):
    y = np.asarray(y, dtype=float)
    n, d = y.shape
    h = _fd_steps(y, JAC_STEP)
    out = np.empty((n, d))
    for b in range(d):
        up, dn = y.copy(), y.copy()
        up[:, b] += h[:, b]
        dn[:, b] -= h[:, b]
        out[:, b] = (g(up) - g(dn)) / (up[:, b] - dn[:, b])
    return out


def fd_hessian(g, y):
    y = np.asarray(y, dtype=float)
    n, d = y.shape
    h = _fd_steps(y, HESS_STEP)
    g0 = g(y)
    out = np.empty((n, d, d))
    for a in range(d):
        up, dn = y.copy(), y.copy()
        up[:, a] += h[:, a]
        dn[:, a] -= h[:, a]
        out[:, a, a] = (g(up) - 2.0 * g0 + g(dn)) / h[:, a] ** 2
        for b in range(a + 1, d):
            pts = []
            for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                z = y.copy()
                z[:, a] += sa * h[:, a]
                z[:, b] += sb * h[:, b]
                pts.append(g(z))
            val = (pts[0] - pts[1] - pts[2] + pts[3]) / (4.0 * h[:, a] * h[:, b])
            out[:, a, b] = out[:, b, a] = val
    return out


def fd_jacobian(field, y):
    """``J[n, a, b] = d field_a / d y_b`` by central differences."""
    y = np.asarray(y, dtype=float)
    n, d = y.shape
    h = _fd_steps(y, JAC_STEP)
    out = np.empty((n, d, d))
    for b in range(d):
        up, dn = y.copy(), y.copy()
        up[:, b] += h[:, b]
        dn[:, b] -= h[:, b]
        out[:, :, b] = (field(up) - field(dn)) / (up[:, b] - dn[:, b])[:, None]
    return out


@dataclass(frozen=True, eq=False)
class ProblemDefinition:
    """Coefficients of ``dX = sum_i V_i(t, X, E phi_i(X)) dB^i`` plus the backward data.

    ``drift`` is the Ito drift ``V_0``; ``diffusion[k]`` is the column ``V_{k+1}``.
    ``mckean[i]`` is ``phi_i`` for ``i = 0..d``.  When ``measure_coefficients`` is
    given (``d + 1`` callables ``(t, y, measure)``) the scalar-``w`` fields are
    ignored and the tree is restricted to ``q = 1``.

    ``state_independent`` promises that no ``V_i`` depends on ``y``; the forward
    integrator then solves each cubature ODE once per path and shifts all nodes.
    """

    dimension: int
    horizon: float
    x0: np.ndarray
    drift: Field
    diffusion: tuple
    mckean: tuple
    driver: Callable
    driver_functional: Callable
    terminal: Callable
    diffusion_jacobians: Optional[tuple] = None
    measure_coefficients: Optional[tuple] = None
    state_independent: bool = False
    name: str = "custom"

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.dimension,):
            raise ValueError("initial point must have shape (d,)")
        object.__setattr__(self, "x0", x0)
        if self.measure_coefficients is not None:
            if len(self.measure_coefficients) != self.dimension + 1:
                raise ValueError("measure mode needs d + 1 coefficient functions")
        else:
            if len(self.diffusion) != self.dimension:
                raise ValueError("need one diffusion column per Brownian coordinate")
            if len(self.mckean) != self.dimension + 1:
                raise ValueError("need McKean functionals phi_0..phi_d")
        mckean = tuple(m if isinstance(m, Functional) else Functional(m) for m in self.mckean)
        object.__setattr__(self, "mckean", mckean)

    @property
    def measure_mode(self) -> bool:
        return self.measure_coefficients is not None


class FrozenCoefficients:
    """The fields ``V_i(t, ., .)`` with their law argument fixed for one step.

    ``args(t)`` returns the McKean arguments ``(w_0, ..., w_d)`` at time ``t``;
    in measure mode the same measure handle is passed to every field.
    """

    def __init__(self, problem: ProblemDefinition, args: Callable[[float], Sequence]):
        self.problem = problem
        self.args = args

    def vector(self, i: int, t: float, y: np.ndarray, w=None) -> np.ndarray:
        p = self.problem
        w = self.args(t)[i] if w is None else w
        if p.measure_mode:
            fn = p.measure_coefficients[i]
        else:
            fn = p.drift if i == 0 else p.diffusion[i - 1]
        out = fn(t, y, w)
        if not isinstance(out, np.ndarray) or out.shape != y.shape:
            out = np.broadcast_to(np.asarray(out, dtype=float), y.shape)
        return out

    def jacobian(self, k: int, t: float, y: np.ndarray, w=None) -> np.ndarray:
        """Jacobian of the diffusion column ``V_k`` (``k >= 1``) in ``y``."""
        p = self.problem
        w = self.args(t)[k] if w is None else w
        if p.state_independent:
            return np.zeros(y.shape + (y.shape[1],))
        if p.diffusion_jacobians is not None and not p.measure_mode:
            return np.asarray(p.diffusion_jacobians[k - 1](t, y, w), dtype=float)
        return fd_jacobian(lambda z: self.vector(k, t, z, w), y)

    def corrected_drift(self, t: float, y: np.ndarray) -> np.ndarray:
        """Stratonovich drift ``V_0 - 1/2 sum_k (D V_k) V_k``."""
        ws = self.args(t)
        out = np.array(self.vector(0, t, y, ws[0]), dtype=float)
        if self.problem.state_independent:
            return out
        for k in range(1, self.problem.dimension + 1):
            vk = self.vector(k, t, y, ws[k])
            jk = self.jacobian(k, t, y, ws[k])
            out -= 0.5 * np.einsum("nab,nb->na", jk, vk)
        return out


def corrected_drift(problem: ProblemDefinition, t: float, y, w_vec) -> np.ndarray:
    """Stratonovich-corrected drift at ``(t, y)`` with McKean arguments ``w_vec``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    w_vec = tuple(w_vec)
    return FrozenCoefficients(problem, lambda _t: w_vec).corrected_drift(t, y)


# -- exact solutions and toy models ------------------------------------------

@dataclass(frozen=True, eq=False)
class ExactSolution:
    """Reference solution: ``u``, ``v`` and one forward observable ``E g(X_t)``."""

    u: Callable[[float, np.ndarray], np.ndarray]
    v: Callable[[float, np.ndarray], np.ndarray]
    test_function: Callable[[np.ndarray], np.ndarray]
    expected: Callable[[float], float]
    forward_mode: str = "per-level-max"


def normal_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))


def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def tent(y, K):
    """Triangular bump of height and half-width ``K``."""
    return np.maximum(K - np.abs(np.asarray(y, dtype=float)), 0.0)


def tent_expectation(y, var, K):
    """``E tent(y + sqrt(var) Z)`` for standard normal ``Z``."""
    y = np.asarray(y, dtype=float)
    if var <= 0:
        return tent(y, K)
    s = math.sqrt(var)
    F = normal_cdf
    smooth = math.sqrt(var / (2.0 * math.pi)) * (
        np.exp(-(K + y) ** 2 / (2 * var)) + np.exp(-(K - y) ** 2 / (2 * var)) - 2.0 * np.exp(-y * y / (2 * var)))
    return (smooth
            + (K + y) * (F(-y / s) - F((-K - y) / s))
            + (K - y) * (F((K - y) / s) - F(-y / s)))


def tent_expectation_slope(y, var, K):
    """``d/dy`` of :func:`tent_expectation`: ``P(y + sZ in (-K, 0)) - P(y + sZ in (0, K))``."""
    y = np.asarray(y, dtype=float)
    s = math.sqrt(var)
    F = normal_cdf
    return (F(-y / s) - F((-K - y) / s)) - (F((K - y) / s) - F(-y / s))


def _unit_columns(d):
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        cols.append(lambda t, y, w, e=e: np.broadcast_to(e, y.shape))
    return tuple(cols)


def _zero_jacobians(d):
    return tuple((lambda t, y, w: np.zeros(y.shape + (d,))) for _ in range(d))


def _toy_base(d: int, T: float, terminal, name: str) -> ProblemDefinition:
    def drift(t, y, w):
        return np.full(y.shape, float(w))

    def mean_sin(y):
        return np.sin(y).mean(axis=1)

    def mean_sin_grad(y):
        return np.cos(y) / d

    def mean_sin_hess(y):
        n = y.shape[0]
        out = np.zeros((n, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = -np.sin(y) / d
        return out

    zero = Functional(lambda y: np.zeros(y.shape[0]),
                      lambda y: np.zeros(y.shape),
                      lambda y: np.zeros(y.shape + (d,)))

    def driver(t, y, yp, z, w):
        return 0.5 * np.cos(y).sum(axis=1) + w

    def driver_functional(y, yp):
        return np.sin(y).sum(axis=1) * np.exp(-yp * yp)

    return ProblemDefinition(
        dimension=d,
        horizon=T,
        x0=np.zeros(d),
        drift=drift,
        diffusion=_unit_columns(d),
        mckean=(Functional(mean_sin, mean_sin_grad, mean_sin_hess),) + (zero,) * d,
        driver=driver,
        driver_functional=driver_functional,
        terminal=terminal,
        diffusion_jacobians=_zero_jacobians(d),
        state_independent=True,
        name=name,
    )


def make_toy_sb(dimension: int = 1, T: float = 1.0):
    """Smooth-boundary toy model ``dX = E[sin X] dt + dB`` with ``phi = 1.cos``.

    The forward solution is ``X = B``; ``u = 1.cos(x)`` and ``v = -sin(x)``.
    """
    d = int(dimension)
    if d < 1:
        raise ValueError("dimension must be positive")

    def cos_sum(y):
        return np.cos(y).sum(axis=1)

    problem = _toy_base(d, T, cos_sum, "toy-sb")
    exact = ExactSolution(
        u=lambda t, y: cos_sum(y),
        v=lambda t, y: -np.sin(y),
        test_function=cos_sum,
        expected=lambda t: d * math.exp(-t / 2.0),
        forward_mode="per-level-max",
    )
    return problem, exact


def make_toy_lb(dimension: int = 1, K: float = 0.6, T: float = 1.0):
    """Lipschitz-boundary toy model: same dynamics, tent terminal condition.

    ``u(t, x) = U(t, 1.x / sqrt(d)) + 1.cos(x) (1 - exp((t - T)/2))`` where ``U`` is
    the heat-smoothed tent.  ``v`` is only defined for ``t < T``.
    """
    d = int(dimension)
    if not K > 0:
        raise ValueError("K must be positive")
    root_d = math.sqrt(d)

    def terminal(y):
        return tent(y.sum(axis=1) / root_d, K)

    def u(t, y):
        proj = y.sum(axis=1) / root_d
        return tent_expectation(proj, T - t, K) + np.cos(y).sum(axis=1) * (1.0 - math.exp((t - T) / 2.0))

    def v(t, y):
        if t >= T:
            return np.full(y.shape, np.nan)
        proj = y.sum(axis=1) / root_d
        slope = tent_expectation_slope(proj, T - t, K) / root_d
        return slope[:, None] - np.sin(y) * (1.0 - math.exp((t - T) / 2.0))

    problem = _toy_base(d, T, terminal, "toy-lb")
    exact = ExactSolution(
        u=u,
        v=v,
        test_function=terminal,
        expected=lambda t: float(tent_expectation(0.0, t, K)),
        forward_mode="terminal-only",
    )
    return problem, exact


BUILTIN_PROBLEMS = {
    "toy-sb": make_toy_sb,
    "toy-lb": make_toy_lb,
}


def make_problem(name: str, dimension: int = 1, K: float = 0.6, T: float = 1.0):
    if name in ("toy-sb", "sb"):
        return make_toy_sb(dimension, T)
    if name in ("toy-lb", "lb"):
        return make_toy_lb(dimension, K, T)
    raise ValueError(f"unknown problem {name!r}; built-ins are {sorted(BUILTIN_PROBLEMS)}")
