"""Linear programs: problem container, a dense two-phase simplex and a
HiGHS-backed solver with the same result type.

In the simplex, pricing is Dantzig's most-negative reduced cost until a run of degenerate
pivots is detected, after which the phase switches to Bland's smallest-index
rule (entering and leaving), which cannot cycle.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

FEAS_TOL = 1e-7
OPT_TOL = 1e-8
PIVOT_TOL = 1e-10
DEGENERATE_RUN = 30


class LpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class SimplexIterationLimit(RuntimeError):
    """Raised when the pivot budget is exhausted (numerical trouble)."""


@dataclass
class LpProblem:
    """``min c.x  s.t.  A x (<= | =) b,  lb <= x <= ub``.

    ``senses`` holds ``"<="`` or ``"="`` per row.  Bounds may be infinite.
    """

    c: np.ndarray
    A: np.ndarray
    senses: tuple
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    var_names: tuple = ()
    row_names: tuple = ()

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        n = len(self.c)
        self.A = np.asarray(self.A, dtype=np.float64).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.lb = np.asarray(self.lb, dtype=np.float64)
        self.ub = np.asarray(self.ub, dtype=np.float64)
        self.senses = tuple(self.senses)
        m = self.A.shape[0]
        if len(self.b) != m or len(self.senses) != m:
            raise ValueError("row count mismatch between A, b and senses")
        if len(self.lb) != n or len(self.ub) != n:
            raise ValueError("bound vectors must match the variable count")
        if any(s not in ("<=", "=") for s in self.senses):
            raise ValueError("senses must be '<=' or '='")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise ValueError("LP coefficients must be finite")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise ValueError("NaN bound")

    @property
    def n_vars(self) -> int:
        return len(self.c)

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def residuals(self, x) -> np.ndarray:
        """Constraint violations (positive = violated) per row, then bounds."""
        r = self.A @ x - self.b
        row = np.where(np.array(self.senses) == "=", np.abs(r), np.maximum(r, 0.0))
        bnd = np.maximum(np.maximum(self.lb - x, x - self.ub), 0.0)
        return np.concatenate([row, bnd])


@dataclass
class LpResult:
    status: LpStatus
    x: np.ndarray | None = None
    objective: float | None = None
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def _to_standard(p: LpProblem):
    """Rewrite as ``min c's  s.t.  A' s (<=|=) b', s >= 0``.

    Returns the standard-form data plus an affine map back to ``x``:
    ``x = shift + recover @ s``.
    """
    n = p.n_vars
    cols, costs, recover_rows, recover_cols, recover_vals = [], [], [], [], []
    shift = np.zeros(n)
    extra_rows = []  # (col index, upper bound) for finite two-sided bounds
    k = 0
    for j in range(n):
        lo, hi = p.lb[j], p.ub[j]
        if np.isfinite(lo):
            shift[j] = lo
            cols.append(p.A[:, j])
            costs.append(p.c[j])
            recover_rows.append(j), recover_cols.append(k), recover_vals.append(1.0)
            if np.isfinite(hi):
                extra_rows.append((k, hi - lo))
            k += 1
        elif np.isfinite(hi):
            shift[j] = hi
            cols.append(-p.A[:, j])
            costs.append(-p.c[j])
            recover_rows.append(j), recover_cols.append(k), recover_vals.append(-1.0)
            k += 1
        else:
            cols.extend([p.A[:, j], -p.A[:, j]])
            costs.extend([p.c[j], -p.c[j]])
            recover_rows.extend([j, j]), recover_cols.extend([k, k + 1]), recover_vals.extend([1.0, -1.0])
            k += 2
    A = np.column_stack(cols) if cols else np.zeros((p.n_rows, 0))
    b = p.b - p.A @ shift
    senses = list(p.senses)
    if extra_rows:
        ext = np.zeros((len(extra_rows), k))
        for r, (col, width) in enumerate(extra_rows):
            ext[r, col] = 1.0
        A = np.vstack([A, ext])
        b = np.concatenate([b, [w for _, w in extra_rows]])
        senses += ["<="] * len(extra_rows)
    recover = np.zeros((n, k))
    recover[recover_rows, recover_cols] = recover_vals
    return A, b, np.array(senses), np.array(costs, dtype=np.float64), shift, recover


class _Tableau:
    def __init__(self, T, basis, max_iter):
        self.T = T
        self.basis = basis
        self.max_iter = max_iter
        self.iterations = 0

    def pivot(self, r, q):
        T = self.T
        T[r] /= T[r, q]
        col = T[:, q].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        T[:, q] = 0.0
        T[r, q] = 1.0
        self.basis[r] = q

    def run(self, allowed: np.ndarray) -> LpStatus:
        """Minimize the objective held in the last row over ``allowed`` columns."""
        T = self.T
        m = T.shape[0] - 1
        bland = False
        degenerate = 0
        while True:
            if self.iterations >= self.max_iter:
                raise SimplexIterationLimit(f"simplex exceeded {self.max_iter} pivots")
            d = T[m, :-1]
            cand = np.flatnonzero(allowed & (d < -OPT_TOL))
            if cand.size == 0:
                return LpStatus.OPTIMAL
            q = int(cand[0]) if bland else int(cand[np.argmin(d[cand])])
            colq = T[:m, q]
            rows = np.flatnonzero(colq > PIVOT_TOL)
            if rows.size == 0:
                return LpStatus.UNBOUNDED
            ratios = T[rows, -1] / colq[rows]
            best = ratios.min()
            ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
            if bland:
                r = int(ties[np.argmin(self.basis[ties])])
            else:
                # among ties prefer the largest pivot element for stability
                r = int(ties[np.argmax(colq[ties])])
            if best <= 1e-12:
                degenerate += 1
                if degenerate >= DEGENERATE_RUN:
                    bland = True
            else:
                degenerate = 0
            self.pivot(r, q)
            self.iterations += 1


def simplex_solve(problem: LpProblem, max_iter: int = 20000) -> LpResult:
    """Solve ``problem`` with the dense two-phase simplex method.

    Returns an :class:`LpResult` whose status distinguishes optimal,
    infeasible and unbounded problems.  Raises
    :class:`SimplexIterationLimit` if ``max_iter`` pivots are not enough.
    """
    if np.any(problem.lb > problem.ub) or np.any(problem.ub == -np.inf) or np.any(problem.lb == np.inf):
        return LpResult(LpStatus.INFEASIBLE)
    A, b, senses, c, shift, recover = _to_standard(problem)
    m, n = A.shape

    # equilibrate rows so tolerances are scale free
    scale = np.abs(A).max(axis=1) if n else np.ones(m)
    scale[scale == 0] = 1.0
    A = A / scale[:, None]
    b = b / scale

    ineq = senses == "<="
    n_slack = int(ineq.sum())
    slack_col = np.full(m, -1)
    slack_col[ineq] = n + np.arange(n_slack)
    sign = np.where(b < 0, -1.0, 1.0)

    # rows whose slack can start in the basis need no artificial
    needs_art = ~(ineq & (b >= 0))
    n_art = int(needs_art.sum())
    N = n + n_slack + n_art
    T = np.zeros((m + 1, N + 1))
    T[:m, :n] = A
    rows = np.flatnonzero(ineq)
    T[rows, slack_col[rows]] = 1.0
    T[:m, -1] = b
    T[:m] *= sign[:, None]
    basis = np.empty(m, dtype=np.int64)
    art_rows = np.flatnonzero(needs_art)
    basis[~needs_art] = slack_col[~needs_art]
    basis[art_rows] = n + n_slack + np.arange(n_art)
    T[art_rows, basis[art_rows]] = 1.0

    tab = _Tableau(T, basis, max_iter)
    is_art = np.zeros(N, dtype=bool)
    is_art[n + n_slack:] = True

    if n_art:
        T[m, :] = 0.0
        T[m, :] -= T[art_rows].sum(axis=0)
        T[m, :N][is_art] = 0.0
        tab.run(np.ones(N, dtype=bool))
        infeas = -T[m, -1]
        if infeas > FEAS_TOL * max(1.0, np.abs(b).max(initial=0.0)):
            return LpResult(LpStatus.INFEASIBLE, iterations=tab.iterations, info={"phase1": infeas})
        # drive remaining artificials out of the basis, dropping redundant rows
        keep = np.ones(m + 1, dtype=bool)
        for r in np.flatnonzero(is_art[tab.basis]):
            cand = np.flatnonzero(~is_art & (np.abs(T[r, :-1]) > 1e-9))
            if cand.size:
                tab.pivot(r, int(cand[np.argmax(np.abs(T[r, cand]))]))
            else:
                keep[r] = False
        if not keep.all():
            tab.T = T = T[keep]
            tab.basis = tab.basis[keep[:-1]]
            m = T.shape[0] - 1

    cost = np.zeros(N)
    cost[:n] = c
    T[m, :-1] = cost
    T[m, -1] = 0.0
    for r, j in enumerate(tab.basis):
        if cost[j] != 0.0:
            T[m] -= cost[j] * T[r]
    status = tab.run(~is_art)
    if status is LpStatus.UNBOUNDED:
        return LpResult(status, iterations=tab.iterations)

    s = np.zeros(N)
    s[tab.basis] = T[:m, -1]
    x = shift + recover @ s[:n]
    return LpResult(LpStatus.OPTIMAL, x=x, objective=float(problem.c @ x), iterations=tab.iterations)


_HIGHS_STATUS = {0: LpStatus.OPTIMAL, 2: LpStatus.INFEASIBLE, 3: LpStatus.UNBOUNDED}


def highs_solve(problem: LpProblem) -> LpResult:
    """Solve ``problem`` with scipy's HiGHS dual simplex.

    HiGHS presolve may only report "infeasible or unbounded"; such cases are
    re-solved without presolve to get a definite status.
    """
    if np.any(problem.lb > problem.ub) or np.any(problem.ub == -np.inf) or np.any(problem.lb == np.inf):
        return LpResult(LpStatus.INFEASIBLE)
    eq = np.array(problem.senses) == "="
    kw = dict(
        A_ub=problem.A[~eq] if (~eq).any() else None, b_ub=problem.b[~eq] if (~eq).any() else None,
        A_eq=problem.A[eq] if eq.any() else None, b_eq=problem.b[eq] if eq.any() else None,
        bounds=np.column_stack([problem.lb, problem.ub]), method="highs-ds",
    )
    res = linprog(problem.c, **kw)
    if res.status in (2, 3):
        res = linprog(problem.c, options={"presolve": False}, **kw)
    status = _HIGHS_STATUS.get(res.status)
    if status is None:
        raise SimplexIterationLimit(f"HiGHS failed: {res.message}")
    if status is not LpStatus.OPTIMAL:
        return LpResult(status, info={"message": res.message})
    x = np.asarray(res.x, dtype=np.float64)
    return LpResult(status, x=x, objective=float(problem.c @ x), iterations=int(res.nit))


SOLVERS = {"highs": highs_solve, "simplex": simplex_solve}


def solve_lp(problem: LpProblem, method: str = "highs") -> LpResult:
    """Solve ``problem`` with the named backend (``"highs"`` or ``"simplex"``)."""
    if method not in SOLVERS:
        raise ValueError(f"unknown LP method {method!r}; choose from {sorted(SOLVERS)}")
    return SOLVERS[method](problem)


def to_lp_text(problem: LpProblem) -> str:
    """Render ``problem`` in the common CPLEX-style LP text layout."""
    names = list(problem.var_names) or [f"x{j}" for j in range(problem.n_vars)]
    rnames = list(problem.row_names) or [f"c{i}" for i in range(problem.n_rows)]

    def expr(coefs):
        terms = []
        for j in np.flatnonzero(coefs):
            v = coefs[j]
            terms.append(f"{'-' if v < 0 else '+'} {abs(v):.17g} {names[j]}")
        if not terms:
            return "0 " + names[0] if names else "0"
        s = " ".join(terms)
        return s[2:] if s.startswith("+ ") else s

    lines = ["\\ exchange-capacity LP", "Minimize", f" obj: {expr(problem.c)}", "Subject To"]
    for i in range(problem.n_rows):
        op = "<=" if problem.senses[i] == "<=" else "="
        lines.append(f" {rnames[i]}: {expr(problem.A[i])} {op} {problem.b[i]:.17g}")
    lines.append("Bounds")
    for j, nm in enumerate(names):
        lo, hi = problem.lb[j], problem.ub[j]
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f" {nm} free")
        elif lo == hi:
            lines.append(f" {nm} = {lo:.17g}")
        else:
            left = "-inf" if np.isinf(lo) else f"{lo:.17g}"
            right = "+inf" if np.isinf(hi) else f"{hi:.17g}"
            lines.append(f" {left} <= {nm} <= {right}")
    lines.append("End")
    return "\n".join(lines) + "\n"
