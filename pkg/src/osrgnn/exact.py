"""Exact switching baselines: exhaustive enumeration and branch and bound.

Both solvers maximize exchange capacity over decisions with at most
``max_openings`` open switches, skip decisions that only reproduce the
all-closed buses (other than all-closed itself), and break capacity ties
towards the lexicographically largest decision, so all-closed wins any tie
it is part of.
"""
from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .h2mg import Grid
from .powerlp import exchange_capacity, solve_exchange
from .surrogate import SubstationPatterns

MAX_EXHAUSTIVE_SWITCHES = 24
TIE_RTOL = 1e-9
# looser than the tie tolerance so LP round-off never prunes a tying leaf
PRUNE_RTOL = 1e-6


class NoFeasibleDecision(RuntimeError):
    """Every examined decision makes the exchange LP infeasible."""


@dataclass(frozen=True)
class SolverConfig:
    max_openings: int = 6
    gap: float = 0.01
    time_limit: float | None = 600.0

    def __post_init__(self):
        if self.max_openings < 0:
            raise ValueError("max_openings must be >= 0")
        if self.gap < 0:
            raise ValueError("gap must be >= 0")
        if self.time_limit is not None and self.time_limit < 0:
            raise ValueError("time_limit must be >= 0 or None")


@dataclass
class SolveResult:
    decision: np.ndarray
    capacity: float
    bound: float
    gap_achieved: float
    timed_out: bool = False
    nodes: int = 0
    lp_solves: int = 0


def _tol(c: float) -> float:
    return TIE_RTOL * max(1.0, abs(c))


def _pick(cands) -> tuple[np.ndarray, float]:
    """Best (decision, capacity): max capacity, ties to the largest vector."""
    best = max(c for _, c in cands)
    tied = [y for y, c in cands if c >= best - _tol(best)]
    y = max(tied, key=lambda v: tuple(v.tolist()))
    return y, next(c for v, c in cands if v is y)


def exhaustive_best(grid: Grid, max_openings: int) -> SolveResult:
    """Evaluate every decision with at most ``max_openings`` open switches."""
    n = grid.n_switches
    if n > MAX_EXHAUSTIVE_SWITCHES:
        raise ValueError(f"exhaustive search is limited to {MAX_EXHAUSTIVE_SWITCHES} switches, got {n}")
    if max_openings < 0:
        raise ValueError("max_openings must be >= 0")
    pats = SubstationPatterns(grid)
    cands = []
    solves = 0
    for k in range(min(max_openings, n) + 1):
        for opened in itertools.combinations(range(n), k):
            y = np.ones(n, dtype=np.int8)
            y[list(opened)] = 0
            if k and pats.is_noop(y):
                continue
            res = exchange_capacity(grid, y)
            solves += 1
            if res.feasible:
                cands.append((y, res.capacity))
    if not cands:
        raise NoFeasibleDecision("no decision within the opening budget is feasible")
    y, cap = _pick(cands)
    return SolveResult(y, cap, cap, 0.0, nodes=solves, lp_solves=solves)


def branch_and_bound(grid: Grid, config: SolverConfig) -> SolveResult:
    """Best-first branch and bound on switch states.

    A node fixes some switches and relaxes the rest to [0, 1] in the big-M
    rows; its bound is that relaxation's capacity under the opening budget.
    Nodes are pruned when their bound cannot beat the incumbent by more than
    the relative ``gap``; with ``gap == 0`` nodes that could tie are kept, so
    the tie rule matches :func:`exhaustive_best`.
    """
    t0 = time.monotonic()
    n = grid.n_switches
    k_max = config.max_openings
    pats = SubstationPatterns(grid)
    stats = {"nodes": 0, "lp": 0}

    closed = exchange_capacity(grid)
    stats["lp"] += 1
    cands = [(grid.all_closed(), closed.capacity)] if closed.feasible else []
    incumbent = closed.capacity if closed.feasible else -math.inf
    seen = {grid.all_closed().tobytes()}

    def out_of_time():
        return config.time_limit is not None and time.monotonic() - t0 >= config.time_limit

    def prune_level(inc):
        if inc == -math.inf:
            return -math.inf
        if config.gap == 0:
            return inc - PRUNE_RTOL * max(1.0, abs(inc))
        return inc + config.gap * abs(inc)

    def keep(bound, inc):
        return bound >= prune_level(inc) if config.gap == 0 else bound > prune_level(inc)

    def offer(y):
        nonlocal incumbent
        key = y.tobytes()
        if key in seen:
            return
        seen.add(key)
        if n - int(y.sum()) > k_max or pats.is_noop(y):
            return
        res = exchange_capacity(grid, y)
        stats["lp"] += 1
        if res.feasible:
            cands.append((y, res.capacity))
            incumbent = max(incumbent, res.capacity)

    def relax(fixed):
        stats["lp"] += 1
        res = solve_exchange(grid, fixed, max_openings=k_max)
        if not res.feasible:
            return None, None
        return res.capacity, res.solution.y_relaxed

    heap = []
    counter = itertools.count()
    timed_out = False
    if n and k_max > 0:
        root = np.full(n, np.nan)
        b, yr = relax(root)
        if b is not None:
            heapq.heappush(heap, (-b, 0, next(counter), root, yr))

    while heap:
        if out_of_time():
            timed_out = True
            break
        negb, negdepth, _, fixed, yr = heapq.heappop(heap)
        if not keep(-negb, incumbent):
            continue
        stats["nodes"] += 1
        free = np.flatnonzero(np.isnan(fixed))
        # an integral relaxation is itself a completion worth recording
        if yr is not None and np.all(np.abs(yr - np.round(yr)) < 1e-9):
            y = fixed.copy()
            y[free] = np.round(yr)
            offer(y.astype(np.int8))
        if not len(free):
            continue
        # branch on the most fractional relaxed switch, first in order on ties
        e = int(free[np.argmin(np.abs(yr - 0.5))])
        n_open = int(np.sum(fixed == 0))
        for val in (1.0, 0.0):
            if val == 0.0 and n_open >= k_max:
                continue
            child = fixed.copy()
            child[e] = val
            if not np.isnan(child).any():
                offer(child.astype(np.int8))
                continue
            b, yc = relax(child)
            if b is not None and keep(b, incumbent):
                heapq.heappush(heap, (-b, negdepth - 1, next(counter), child, yc))

    if not timed_out and out_of_time():
        timed_out = bool(heap)
    if not cands:
        raise NoFeasibleDecision("all-closed is infeasible and no feasible decision was found")
    y, cap = _pick(cands)
    open_bounds = [-h[0] for h in heap if keep(-h[0], incumbent)]
    bound = max([cap] + open_bounds)
    gap = (bound - cap) / abs(cap) if cap != 0 else (0.0 if bound == cap else math.inf)
    return SolveResult(y, cap, bound, max(gap, 0.0), timed_out, stats["nodes"], stats["lp"])


class ExhaustiveSolver(BaseEstimator):
    """Enumeration baseline with the estimator interface.

    Parameters
    ----------
    max_openings : int
        Largest number of open switches considered.
    """

    def __init__(self, max_openings: int = 3):
        self.max_openings = max_openings

    def fit(self, X=None, y=None):
        return self

    def solve(self, grid: Grid) -> SolveResult:
        return exhaustive_best(grid, self.max_openings)

    def predict(self, X) -> list[np.ndarray]:
        return [self.solve(g).decision for g in X]


class BranchAndBoundSolver(BaseEstimator):
    """Branch-and-bound baseline with the estimator interface.

    Parameters
    ----------
    max_openings : int
        Opening budget.
    gap : float
        Relative optimality gap at which search stops.
    time_limit : float or None
        Wall-clock seconds per grid; None disables the limit.
    """

    def __init__(self, max_openings: int = 6, gap: float = 0.01, time_limit: float | None = 600.0):
        self.max_openings = max_openings
        self.gap = gap
        self.time_limit = time_limit

    def fit(self, X=None, y=None):
        return self

    def solve(self, grid: Grid) -> SolveResult:
        return branch_and_bound(grid, SolverConfig(self.max_openings, self.gap, self.time_limit))

    def predict(self, X) -> list[np.ndarray]:
        return [self.solve(g).decision for g in X]
