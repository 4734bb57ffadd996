"""Cubature formulas on Wiener space.

A formula is a finite set of piecewise-linear paths on [0, 1] with positive
weights whose expected iterated Stratonovich integrals agree with those of
Brownian motion up to a given degree.  Everything here is closed form: the
signature of a linear segment with increment ``a`` is ``exp(a)`` in the
truncated tensor algebra, and Chen's identity glues segments together.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MOMENT_TOL = 1e-12
WEIGHT_SUM_TOL = 1e-14


class CubatureError(ValueError):
    pass


class UnsupportedFormulaError(CubatureError):
    pass


@dataclass(frozen=True, eq=False)
class PiecewisePath:
    """Continuous piecewise-linear path ``[0, 1] -> R^d`` starting at the origin."""

    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if times.ndim != 1 or len(times) < 2 or points.shape[0] != len(times):
            raise CubatureError("a path needs at least two knots with matching points")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise CubatureError("knot times must start at 0 and end at 1")
        if np.any(np.diff(times) <= 0):
            raise CubatureError("knot times must be strictly increasing")
        if np.any(points[0] != 0.0):
            raise CubatureError("paths must start at the origin")
        times.setflags(write=False)
        points.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "points", points)

    @classmethod
    def straight(cls, endpoint: Sequence[float]) -> "PiecewisePath":
        end = np.atleast_1d(np.asarray(endpoint, dtype=float))
        return cls(np.array([0.0, 1.0]), np.vstack([np.zeros_like(end), end]))

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def endpoint(self) -> np.ndarray:
        return self.points[-1]

    def segments(self) -> Iterator[tuple[float, float, np.ndarray]]:
        """Yield ``(start time, end time, increment)`` for every linear piece."""
        for a in range(len(self.times) - 1):
            yield self.times[a], self.times[a + 1], self.points[a + 1] - self.points[a]

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = np.stack([np.interp(s, self.times, self.points[:, i])
                        for i in range(self.dimension)], axis=-1)
        return out

    def time_weighted_increment(self) -> np.ndarray:
        """``int_0^1 s d omega(s)``, exact per linear segment."""
        total = np.zeros(self.dimension)
        for s0, s1, inc in self.segments():
            total += inc * (s1 + s0) / 2.0
        return total


@dataclass(frozen=True, eq=False)
class ScaledPath:
    """A base path rescaled onto ``[t, t + h]``: ``s -> sqrt(h) * base((s - t) / h)``."""

    base: PiecewisePath
    t: float
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise CubatureError("interval length must be positive")

    def __call__(self, s):
        return math.sqrt(self.h) * self.base((np.asarray(s, dtype=float) - self.t) / self.h)

    def segments(self) -> Iterator[tuple[float, float, np.ndarray]]:
        """Segments in real time: ``(start, end, increment)``."""
        root = math.sqrt(self.h)
        for s0, s1, inc in self.base.segments():
            yield self.t + s0 * self.h, self.t + s1 * self.h, root * inc


def path_increment_integrals(path: ScaledPath) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint increment and ``int_t^{t+h} (s - t) d omega~(s)`` of a scaled path."""
    root = math.sqrt(path.h)
    return root * path.base.endpoint, path.h * root * path.base.time_weighted_increment()


@dataclass(frozen=True, eq=False)
class CubatureFormula:
    dimension: int
    degree: int
    paths: tuple[PiecewisePath, ...]
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        paths = tuple(self.paths)
        if len(paths) != len(weights) or not paths:
            raise CubatureError("need one positive weight per path")
        if np.any(weights <= 0):
            raise CubatureError("cubature weights must be positive")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise CubatureError(f"weights sum to {weights.sum()!r}, not 1")
        if any(p.dimension != self.dimension for p in paths):
            raise CubatureError("all paths must share the formula dimension")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "paths", paths)

    @property
    def size(self) -> int:
        return len(self.paths)

    @property
    def endpoints(self) -> np.ndarray:
        """Array of shape ``(kappa, d)`` with every ``omega_j(1)``."""
        return np.array([p.endpoint for p in self.paths])

    @property
    def time_weighted(self) -> np.ndarray:
        return np.array([p.time_weighted_increment() for p in self.paths])

    def scaled(self, t: float, h: float) -> list[ScaledPath]:
        return [ScaledPath(p, t, h) for p in self.paths]

    def to_record(self) -> dict:
        return {
            "dimension": self.dimension,
            "degree": self.degree,
            "weights": [float(w) for w in self.weights],
            "paths": [[[float(t), *map(float, pt)] for t, pt in zip(p.times, p.points)]
                      for p in self.paths],
        }


def make_cubature(dimension: int, degree: int) -> CubatureFormula:
    """Built-in formulas: degree 3 in any dimension, degree 5 in dimension one."""
    if dimension < 1:
        raise UnsupportedFormulaError("dimension must be positive")
    if degree == 3:
        scale = math.sqrt(dimension)
        paths = []
        for axis in range(dimension):
            for sign in (1.0, -1.0):
                end = np.zeros(dimension)
                end[axis] = sign * scale
                paths.append(PiecewisePath.straight(end))
        return CubatureFormula(dimension, 3, tuple(paths), np.full(2 * dimension, 1.0 / (2 * dimension)))
    if degree == 5 and dimension == 1:
        r3 = math.sqrt(3.0)
        paths = tuple(PiecewisePath.straight([z]) for z in (-r3, 0.0, r3))
        return CubatureFormula(1, 5, paths, np.array([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]))
    raise UnsupportedFormulaError(
        f"unsupported formula (dimension={dimension}, degree={degree}); "
        "supply a published table through load_cubature instead")


# -- signatures ---------------------------------------------------------------

def _tensor_product(a: list[np.ndarray], b: list[np.ndarray], depth: int) -> list[np.ndarray]:
    out = []
    for n in range(depth + 1):
        acc = None
        for i in range(n + 1):
            term = np.multiply.outer(a[i], b[n - i])
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


def _segment_signature(increment: np.ndarray, depth: int) -> list[np.ndarray]:
    levels = [np.array(1.0)]
    for n in range(1, depth + 1):
        levels.append(np.multiply.outer(levels[-1], increment) / n)
    return levels


def path_signature(path: PiecewisePath, depth: int) -> list[np.ndarray]:
    """Truncated signature; level ``l`` is a ``d^l`` tensor of iterated integrals."""
    sig = None
    for _, _, inc in path.segments():
        seg = _segment_signature(inc, depth)
        sig = seg if sig is None else _tensor_product(sig, seg, depth)
    return sig


def expected_signature(dimension: int, depth: int) -> list[np.ndarray]:
    """Expected Stratonovich signature of Brownian motion at time one.

    Equals ``exp(1/2 sum_i e_i (x) e_i)``: odd levels vanish and level ``2k``
    is ``(1/2 sum_i e_i (x) e_i)^k / k!``.
    """
    half_eye = 0.5 * np.eye(dimension)
    out = [np.array(1.0)]
    power = np.array(1.0)
    for n in range(1, depth + 1):
        if n % 2:
            out.append(np.zeros((dimension,) * n))
        else:
            k = n // 2
            power = np.multiply.outer(power, half_eye)
            out.append(power / math.factorial(k))
    return out


@dataclass(frozen=True)
class MomentCheck:
    word: tuple[int, ...]
    cubature: float
    wiener: float
    passed: bool


@dataclass
class VerificationReport:
    degree: int
    checks: list[MomentCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[MomentCheck]:
        return [c for c in self.checks if not c.passed]

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            word = "".join(str(i + 1) for i in c.word)
            status = "ok  " if c.passed else "FAIL"
            out.append(f"{status} E[S^({word})] cubature={c.cubature:+.17g} wiener={c.wiener:+.17g}")
        return out


def verify_formula(formula: CubatureFormula, degree: int | None = None,
                   tol: float = MOMENT_TOL) -> VerificationReport:
    """Compare every iterated integral of length ``<= degree`` against Wiener measure."""
    degree = formula.degree if degree is None else degree
    d = formula.dimension
    acc = [np.zeros((d,) * n) for n in range(degree + 1)]
    for lam, path in zip(formula.weights, formula.paths):
        for n, level in enumerate(path_signature(path, degree)):
            acc[n] = acc[n] + lam * level
    ref = expected_signature(d, degree)
    checks = []
    for n in range(1, degree + 1):
        for word in itertools.product(range(d), repeat=n):
            c, w = float(acc[n][word]), float(ref[n][word])
            checks.append(MomentCheck(word, c, w, abs(c - w) <= tol))
    return VerificationReport(degree, checks)


# -- tables -------------------------------------------------------------------

def load_cubature(record: dict) -> CubatureFormula:
    """Build a formula from a table record and reject it unless every identity holds."""
    try:
        dimension = int(record["dimension"])
        degree = int(record["degree"])
        weights = [float(w) for w in record["weights"]]
        raw_paths = record["paths"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CubatureError(f"malformed cubature record: {exc}") from exc
    paths = []
    for knots in raw_paths:
        arr = np.asarray(knots, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != dimension + 1:
            raise CubatureError("each knot must be [time, x_1, ..., x_d]")
        paths.append(PiecewisePath(arr[:, 0], arr[:, 1:]))
    formula = CubatureFormula(dimension, degree, tuple(paths), np.array(weights))
    report = verify_formula(formula)
    if not report.passed:
        bad = report.failures[0]
        word = "".join(str(i + 1) for i in bad.word)
        raise CubatureError(
            f"moment identity for word ({word}) violated: cubature gives {bad.cubature!r}, "
            f"Wiener measure gives {bad.wiener!r}")
    return formula


def read_cubature(path: str | Path) -> CubatureFormula:
    with open(path) as fh:
        return load_cubature(json.load(fh))


def write_cubature(formula: CubatureFormula, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(formula.to_record(), fh, indent=1)
