"""Run configuration and convergence studies shared by the CLI and the tests."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import analysis
from .backward import solve
from .cubature import make_cubature, read_cubature
from .forward import build_tree, node_budget
from .problem import make_problem
from .timegrid import make_grid

AUTO_CHECKPOINT_N = 1024
SCHEMES = ("forward-only", "first-order", "second-order")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "toy-sb"
    dim: int = 1
    K: float = 0.6
    T: float = 1.0
    scheme: str = "first-order"
    m: int = 3
    q: int = 1
    gamma: float = 1.0
    N: list = field(default_factory=lambda: [4])
    substeps: int = 8
    recombine: bool = False
    out: str = "out"
    jobs: int = 1
    cubature_table: Optional[str] = None
    tail: int = analysis.DEFAULT_TAIL
    checkpoint: int = 0

    def checkpoint_stride(self, N: int) -> Optional[int]:
        """Stride for checkpointed trees in convergence runs; ``0`` picks one."""
        if self.checkpoint > 0:
            return self.checkpoint
        if self.checkpoint == 0 and self.recombine and N > AUTO_CHECKPOINT_N:
            return math.isqrt(N - 1) + 1
        return None

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def validate(self, formula_size: Optional[int] = None) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if not self.gamma >= 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.q < 1:
            raise ConfigError("q must be >= 1")
        if self.dim < 1:
            raise ConfigError("dimension must be positive")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        if self.jobs < 0:
            raise ConfigError("jobs must be >= 0")
        if not self.N or any(int(n) != n or n < 1 for n in self.N):
            raise ConfigError("N must be a non-empty list of positive integers")
        if any(b <= a for a, b in zip(self.N, self.N[1:])):
            raise ConfigError("N list must be strictly increasing")
        if self.scheme == "second-order" and min(self.N) < 2:
            raise ConfigError("the second-order scheme needs N >= 2")

    def formula(self):
        if self.cubature_table:
            return read_cubature(self.cubature_table)
        return make_cubature(self.dim, self.m)

    def order(self) -> int:
        return {"forward-only": 0, "first-order": 1, "second-order": 2}[self.scheme]


def run_case(config: RunConfig, N: int):
    """Build the tree for one ``N`` and run the configured scheme."""
    problem, exact, tree = build_case(config, N)
    order = config.order()
    result = solve(tree, order) if order else None
    return problem, exact, tree, result


def build_case(config: RunConfig, N: int, checkpoint: Optional[int] = None):
    problem, exact = make_problem(config.problem, config.dim, config.K, config.T)
    grid = make_grid(config.T, N, config.gamma)
    tree = build_tree(problem, config.formula(), grid, q=config.q, substeps=config.substeps,
                      recombine=config.recombine, jobs=config.jobs, checkpoint=checkpoint)
    return problem, exact, tree


def measure_case(config: RunConfig, N: int) -> analysis.ErrorRecord:
    """Errors for one ``N``; backward values are streamed, never stored for all levels."""
    start = time.perf_counter()
    _, exact, tree = build_case(config, N, config.checkpoint_stride(N))
    fwd = analysis.forward_error(tree, exact.test_function, exact.expected, exact.forward_mode)
    order = config.order()
    if order:
        acc = analysis.BackwardErrors(tree, exact.u, exact.v)
        solve(tree, order, on_level=acc, keep=False)
        e_u, e_v, e_vw = acc.e_u, acc.e_v, acc.e_v_weighted
    else:
        e_u = e_v = e_vw = float("nan")
    nodes = tree.node_count
    if hasattr(tree, "close"):
        tree.close()
    del tree
    return analysis.ErrorRecord(N, fwd, e_u, e_v, e_vw, nodes, time.perf_counter() - start)


def run_convergence(config: RunConfig, progress=None) -> analysis.ErrorReport:
    report = analysis.ErrorReport([])
    for N in config.N:
        rec = measure_case(config, N)
        report.records.append(rec)
        if progress is not None:
            progress(rec)
    return report


ERROR_COLUMNS = ("forward_err", "E_u", "E_v", "E_v_weighted")


def summary(config: RunConfig, report: analysis.ErrorReport) -> dict:
    slopes = {}
    for col in ERROR_COLUMNS:
        pts = [(n, e) for n, e in report.series(col) if np.isfinite(e) and e > 0]
        slopes[col] = analysis.fit_rate(pts, min(config.tail, len(pts))) if len(pts) >= 2 else None
    return {
        "config": dataclasses.asdict(config),
        "tail": config.tail,
        "slopes": slopes,
        "node_budget": node_budget(),
    }
