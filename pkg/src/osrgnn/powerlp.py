"""DC exchange-capacity linear program.

Variables are ordered ``[lambda, theta_0 .. theta_{n-1}, F_0 .. F_{s-1}]``
(addresses in grid order, switches in grid order), optionally followed by
relaxed switch states ``y`` for the switches left free by a branch-and-bound
node.  ``mu`` is substituted by its affine expression in ``lambda`` so the
problem stays linear.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .h2mg import Grid, check_decision
from .lp import LpProblem, LpResult, LpStatus, solve_lp, to_lp_text

BASE_MVA = 100.0


class DegenerateContext(ValueError):
    """The Z2 base load is zero, so ``mu`` is undefined."""


@dataclass
class LpSolution:
    lambda_: float
    mu: float
    theta: np.ndarray
    switch_flows: np.ndarray
    line_flows: np.ndarray
    objective: float
    y_relaxed: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class ExchangeCapacity:
    """Outcome of one exchange-capacity evaluation.

    ``capacity`` is in MW and is ``None`` unless ``status`` is optimal.
    """

    status: LpStatus
    capacity: float | None = None
    solution: LpSolution | None = None

    @property
    def feasible(self) -> bool:
        return self.status is LpStatus.OPTIMAL

    @property
    def capacity_pu(self) -> float | None:
        return None if self.capacity is None else self.capacity / BASE_MVA

    @property
    def objective(self) -> float | None:
        """f(y; x), the minimized LP objective (minus the capacity)."""
        return None if self.capacity is None else -self.capacity


def default_big_m(grid: Grid) -> float:
    return grid.total_generation


def _zone_sums(grid: Grid):
    g, ld = grid.generators, grid.loads
    return (
        float(g.p[g.in_z1].sum()), float(g.p[g.in_z2].sum()),
        float(ld.p[ld.in_z1].sum()), float(ld.p[ld.in_z2].sum()),
    )


def build_exchange_lp(grid: Grid, decision, M: float | None = None, *,
                      max_openings: int | None = None) -> LpProblem:
    """Assemble the exchange-capacity LP for ``decision``.

    ``decision`` entries are 0/1, or NaN for switches whose state is relaxed
    to a continuous variable in [0, 1] (branch-and-bound bounds).  With
    ``max_openings`` a cardinality row ``sum(1 - y) <= max_openings`` is added.
    """
    y = np.asarray(decision, dtype=np.float64)
    if y.ndim != 1 or len(y) != grid.n_switches:
        raise ValueError(f"decision has shape {y.shape}, grid has {grid.n_switches} switches")
    free = np.isnan(y)
    if not np.all(free | (y == 0) | (y == 1)):
        raise ValueError("decision entries must be 0, 1 or NaN")
    M = default_big_m(grid) if M is None else float(M)
    if not M > 0:
        raise ValueError("big-M must be positive")
    g1, g2, l1, l2 = _zone_sums(grid)
    if l2 == 0:
        raise DegenerateContext("total Z2 load is zero; mu is undefined")

    n_a, n_s = grid.n_addresses, grid.n_switches
    free_idx = np.flatnonzero(free)
    n_y = len(free_idx)
    n = 1 + n_a + n_s + n_y
    th = 1
    fl = 1 + n_a
    yv = 1 + n_a + n_s
    P = grid.ports
    ln = grid.lines
    on = np.flatnonzero(ln.in_service)
    lf, lt = P["line", "of"][on], P["line", "ot"][on]
    inv_x = 1.0 / ln.x[on]

    sf, st = P["switch", "of"], P["switch", "ot"]
    n_l = len(on)
    m = 4 * n_s + 2 * n_l + n_a + (1 if n_a else 0)
    A = np.zeros((m, n))
    b = np.zeros(m)
    senses = ["<="] * (4 * n_s + 2 * n_l) + ["="] * (m - 4 * n_s - 2 * n_l)
    names = []

    # switches: angle coupling |dtheta| <= M (1 - y) and flow limits |F| <= M y
    e = np.arange(n_s)
    kfree = np.full(n_s, -1)
    kfree[free_idx] = np.arange(n_y)
    fr = kfree >= 0
    yfix = np.where(fr, 0.0, np.nan_to_num(y))
    for r0, sign in ((0, 1.0), (1, -1.0)):
        rows = 4 * e + r0
        np.add.at(A, (rows, th + st), sign)
        np.add.at(A, (rows, th + sf), -sign)
        A[rows[fr], yv + kfree[fr]] = M
        b[rows] = np.where(fr, M, M * (1.0 - yfix))
    for r0, sign in ((2, 1.0), (3, -1.0)):
        rows = 4 * e + r0
        A[rows, fl + e] = sign
        A[rows[fr], yv + kfree[fr]] = -M
        b[rows] = np.where(fr, 0.0, M * yfix)
    for k in range(n_s):
        names += [f"sw{k}_angp", f"sw{k}_angn", f"sw{k}_flowp", f"sw{k}_flown"]

    # thermal limits of in-service lines
    r = 4 * n_s + 2 * np.arange(n_l)
    for r0, sign in ((0, 1.0), (1, -1.0)):
        np.add.at(A, (r + r0, th + lt), sign * inv_x)
        np.add.at(A, (r + r0, th + lf), -sign * inv_x)
        b[r + r0] = ln.f_bar[on]
    for i in on:
        names += [f"line{i}_limp", f"line{i}_limn"]

    # nodal balance with mu = (g1 * lam + g2 - l1) / l2 substituted
    r_bal = 4 * n_s + 2 * n_l
    bal = A[r_bal:r_bal + n_a]
    const = np.zeros(n_a)
    g, ld = grid.generators, grid.loads
    gpos, lpos = P["gen", "o"], P["load", "o"]
    np.add.at(bal[:, 0], gpos[g.in_z1], -g.p[g.in_z1])
    np.add.at(const, gpos[g.in_z2], -g.p[g.in_z2])
    np.add.at(const, lpos[ld.in_z1], ld.p[ld.in_z1])
    np.add.at(bal[:, 0], lpos[ld.in_z2], ld.p[ld.in_z2] * g1 / l2)
    np.add.at(const, lpos[ld.in_z2], ld.p[ld.in_z2] * (g2 - l1) / l2)
    np.add.at(bal, (sf, fl + e), 1.0)
    np.add.at(bal, (st, fl + e), -1.0)
    # flow from -> to is (theta_f - theta_t) / X
    np.add.at(bal, (lf, th + lf), inv_x)
    np.add.at(bal, (lf, th + lt), -inv_x)
    np.add.at(bal, (lt, th + lf), -inv_x)
    np.add.at(bal, (lt, th + lt), inv_x)
    b[r_bal:r_bal + n_a] = -const
    names += [f"bal_{int(a)}" for a in grid.addresses]

    if n_a:
        A[-1, th + int(np.argmin(grid.addresses))] = 1.0
        names.append("phase_ref")

    if max_openings is not None and n_y:
        fixed_open = int(np.sum(y[~free] == 0))
        row = np.zeros((1, n))
        row[0, yv:] = -1.0
        A = np.vstack([A, row])
        b = np.append(b, float(max_openings - fixed_open - n_y))
        senses.append("<=")
        names.append("cardinality")

    c = np.zeros(n)
    np.add.at(c, th + lt, ln.s[on] * inv_x)
    np.add.at(c, th + lf, -ln.s[on] * inv_x)

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[0] = 0.0
    lb[yv:], ub[yv:] = 0.0, 1.0
    var_names = (
        ["lambda"]
        + [f"theta_{int(a)}" for a in grid.addresses]
        + [f"F_{k}" for k in range(n_s)]
        + [f"y_{int(k)}" for k in free_idx]
    )
    return LpProblem(c, A, senses, b, lb, ub, tuple(var_names), tuple(names))


def _solution(grid: Grid, res: LpResult) -> LpSolution:
    x = res.x
    n_a, n_s = grid.n_addresses, grid.n_switches
    lam = float(x[0])
    theta = x[1:1 + n_a].copy()
    flows = x[1 + n_a:1 + n_a + n_s].copy()
    P = grid.ports
    ln = grid.lines
    line_flows = np.where(
        ln.in_service, (theta[P["line", "of"]] - theta[P["line", "ot"]]) / np.where(ln.in_service, ln.x, 1.0), 0.0
    )
    g1, g2, l1, l2 = _zone_sums(grid)
    mu = (g1 * lam + g2 - l1) / l2
    return LpSolution(lam, mu, theta, flows, line_flows, float(res.objective), x[1 + n_a + n_s:].copy())


def solve_exchange(grid: Grid, decision, M: float | None = None, *,
                   max_openings: int | None = None, method: str = "highs") -> ExchangeCapacity:
    """Solve the (possibly relaxed) exchange LP; see :func:`build_exchange_lp`.

    Without in-service border lines the objective is identically zero and
    lambda is pinned to 1 when that is feasible, so the reported solution is
    the base operating point.
    """
    prob = build_exchange_lp(grid, decision, M, max_openings=max_openings)
    res = None
    if not np.any(prob.c):
        pinned = replace(prob, lb=prob.lb.copy(), ub=prob.ub.copy())
        pinned.lb[0] = pinned.ub[0] = 1.0
        res = solve_lp(pinned, method)
        if not res.optimal:
            res = None
    if res is None:
        res = solve_lp(prob, method)
    if not res.optimal:
        return ExchangeCapacity(res.status)
    sol = _solution(grid, res)
    # + 0.0 turns a negative zero into 0.0
    return ExchangeCapacity(LpStatus.OPTIMAL, -sol.objective + 0.0, sol)


def exchange_capacity(grid: Grid, decision=None, M: float | None = None, *,
                      method: str = "highs") -> ExchangeCapacity:
    """Exchange capacity (MW) from Z1 to Z2 under a 0/1 switch decision.

    ``decision`` defaults to all switches closed.  Infeasible decisions come
    back with ``status == LpStatus.INFEASIBLE`` and ``capacity is None``.
    """
    y = grid.all_closed() if decision is None else check_decision(grid, decision)
    return solve_exchange(grid, y, M, method=method)


def dump_lp(grid: Grid, decision=None, M: float | None = None) -> str:
    y = grid.all_closed() if decision is None else check_decision(grid, decision)
    return to_lp_text(build_exchange_lp(grid, y, M))
