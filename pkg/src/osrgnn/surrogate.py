"""Bernoulli switching policy, KL surrogate objective and its gradient
estimators.

Scores ``f`` fed to the estimators are raw LP objectives in MW (minus the
exchange capacity); lower is better.  Decisions use 1 = closed, 0 = open.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .h2mg import Grid, check_decision
from .powerlp import exchange_capacity

MAX_ENUM_SWITCHES = 16
MAX_REJECTIONS = 1000


class RejectionFailure(RuntimeError):
    """Rejection sampling found no acceptable pattern within the retry budget."""


# -- policy ----------------------------------------------------------------


def _as_scores(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("scores must be a 1-d vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("scores must be finite")
    return z


def softplus(z):
    return np.logaddexp(0.0, z)


def rho_log_prob(z, y) -> float:
    """log rho(y | z) for independent Bernoulli(sigmoid(z_e)) switch states."""
    z = _as_scores(z)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"decision shape {y.shape} does not match scores {z.shape}")
    return float(np.sum(y * z - softplus(z)))


def entropy(z) -> float:
    """Entropy of the factorized Bernoulli policy."""
    z = _as_scores(z)
    return float(np.sum(softplus(z) - z * expit(z)))


def entropy_term(z) -> np.ndarray:
    """Gradient of the negative entropy, sigmoid(z) * sigmoid(-z) * z."""
    z = _as_scores(z)
    return expit(z) * expit(-z) * z


def most_probable_decision(z) -> np.ndarray:
    """Switch-wise mode of the policy; a zero score resolves to closed."""
    return (_as_scores(z) >= 0).astype(np.int8)


# -- no-op equivalence ------------------------------------------------------


class SubstationPatterns:
    """Per-substation lookup of which local switch patterns change nothing.

    A local pattern is no-op-equivalent when the buses it induces among the
    substation's addresses equal those of the all-closed pattern.  Since
    switches never cross substations, a decision is no-op-equivalent overall
    iff every substation pattern is.
    """

    def __init__(self, grid: Grid):
        self.groups = [idx for idx in grid.substations.values()]
        f, t = grid.ports["switch", "of"], grid.ports["switch", "ot"]
        self._tables = []
        self._partition_ids = []
        self._weights = []
        for idx in self.groups:
            k = len(idx)
            nodes = sorted(set(f[idx].tolist()) | set(t[idx].tolist()))
            loc = {a: i for i, a in enumerate(nodes)}
            ends = [(loc[int(f[e])], loc[int(t[e])]) for e in idx]
            seen: dict[frozenset, int] = {}
            pid = np.array([
                seen.setdefault(_local_partition(len(nodes), ends, _bits(code, k)), len(seen))
                for code in range(2 ** k)
            ])
            self._partition_ids.append(pid)
            self._tables.append(pid == pid[-1])  # the last code is all closed
            self._weights.append(1 << np.arange(k - 1, -1, -1))

    def codes(self, decisions: np.ndarray) -> list[np.ndarray]:
        """Pattern code of every substation, for a (N, n_switches) array."""
        d = np.atleast_2d(decisions).astype(np.int64)
        return [d[:, idx] @ w for idx, w in zip(self.groups, self._weights)]

    def noop_mask(self, decisions: np.ndarray) -> np.ndarray:
        """(N, n_substations) flags: local pattern changes nothing."""
        cols = [tab[c] for tab, c in zip(self._tables, self.codes(decisions))]
        return np.stack(cols, axis=1) if cols else np.zeros((len(np.atleast_2d(decisions)), 0), dtype=bool)

    def is_noop(self, decision) -> bool:
        return bool(self.noop_mask(np.asarray(decision)).all())

    def same_buses(self, a, b) -> bool:
        """True when decisions ``a`` and ``b`` induce the same buses."""
        for pid, c in zip(self._partition_ids, self.codes(np.stack([a, b]))):
            if pid[c[0]] != pid[c[1]]:
                return False
        return True


def _bits(code: int, k: int) -> tuple:
    return tuple((code >> (k - 1 - i)) & 1 for i in range(k))


def _local_partition(n_nodes: int, ends, states) -> frozenset:
    parent = list(range(n_nodes))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for (a, b), s in zip(ends, states):
        if s:
            parent[find(a)] = find(b)
    groups: dict[int, set] = {}
    for i in range(n_nodes):
        groups.setdefault(find(i), set()).add(i)
    return frozenset(frozenset(g) for g in groups.values())


def is_noop_equivalent(grid: Grid, decision) -> bool:
    """True when ``decision`` yields the same buses as all switches closed."""
    y = check_decision(grid, decision)
    return SubstationPatterns(grid).is_noop(y)


# -- sampling ----------------------------------------------------------------


@dataclass(frozen=True)
class SamplingPolicy:
    """How decisions are drawn from the policy during training.

    Parameters
    ----------
    mode : {"independent", "perturb"}
        ``independent`` draws each switch from Bernoulli(sigmoid(z)).
        ``perturb`` starts from the most probable decision and opens one
        extra closed switch with probability ``p1``, two with ``p2``.
    reject_noop : bool
        Resample patterns that change nothing.  In independent mode this is
        done substation by substation; in perturb mode the extra openings are
        redrawn until the bus partition differs from the mode's.
    keep_all_closed : bool
        With rejection on in independent mode, accept a substation pattern
        that is exactly all-closed and only reject the other do-nothing
        patterns.  When False every substation must split.
    """

    mode: str = "independent"
    reject_noop: bool = False
    keep_all_closed: bool = True
    p1: float = 0.3
    p2: float = 0.4

    def __post_init__(self):
        if self.mode not in ("independent", "perturb"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.p1 < 0 or self.p2 < 0 or self.p1 + self.p2 > 1:
            raise ValueError("p1 and p2 must be non-negative with p1 + p2 <= 1")


def sample_decisions(z, grid: Grid, N: int, policy: SamplingPolicy, rng,
                     patterns: SubstationPatterns | None = None) -> np.ndarray:
    """Draw ``N`` decisions, returned as an (N, n_switches) int8 array."""
    z = _as_scores(z)
    if N < 1:
        raise ValueError("N must be at least 1")
    if len(z) != grid.n_switches:
        raise ValueError("scores length does not match the switch count")
    if policy.reject_noop and patterns is None:
        patterns = SubstationPatterns(grid)
    if policy.mode == "independent":
        return _sample_independent(z, N, policy, rng, patterns)
    return _sample_perturb(z, N, policy, rng, patterns)


def _sample_independent(z, N, policy, rng, patterns):
    p = expit(z)
    Y = (rng.random((N, len(z))) < p).astype(np.int8)
    if not policy.reject_noop:
        return Y
    for s, (idx, table) in enumerate(zip(patterns.groups, patterns._tables)):
        w = patterns._weights[s]
        all_closed_code = int(w.sum())
        for i in range(N):
            for _ in range(MAX_REJECTIONS):
                code = int(Y[i, idx] @ w)
                if not table[code] or (policy.keep_all_closed and code == all_closed_code):
                    break
                Y[i, idx] = rng.random(len(idx)) < p[idx]
            else:
                raise RejectionFailure(
                    f"substation {s}: {MAX_REJECTIONS} consecutive do-nothing patterns"
                )
    return Y


def _sample_perturb(z, N, policy, rng, patterns):
    mode = most_probable_decision(z)
    Y = np.repeat(mode[None, :], N, axis=0)
    closed = np.flatnonzero(mode == 1)
    u = rng.random(N)
    k_extra = np.where(u < policy.p1, 1, np.where(u < policy.p1 + policy.p2, 2, 0))
    for i in range(N):
        k = min(int(k_extra[i]), len(closed))
        if k == 0:
            continue
        for _ in range(MAX_REJECTIONS):
            y = mode.copy()
            y[rng.choice(closed, size=k, replace=False)] = 0
            if not policy.reject_noop or not patterns.same_buses(y, mode):
                break
        else:
            raise RejectionFailure(f"{MAX_REJECTIONS} perturbations all left the buses unchanged")
        Y[i] = y
    return Y


# -- scores --------------------------------------------------------------------


def infeasible_score(grid: Grid, f_closed: float | None) -> float:
    """Score assigned to decisions whose LP has no solution.

    It is worse than all-closed by the total generation, so filtering and
    the memory table never favour an infeasible decision.
    """
    return (0.0 if f_closed is None else f_closed) + grid.total_generation


def decision_score(grid: Grid, decision, f_closed: float | None = None, *, method: str = "highs") -> float:
    """LP objective f(y; x) in MW, with the infeasibility penalty applied."""
    res = exchange_capacity(grid, decision, method=method)
    if res.feasible:
        return res.objective
    if f_closed is None:
        closed = exchange_capacity(grid, method=method)
        f_closed = closed.objective if closed.feasible else None
    return infeasible_score(grid, f_closed)


def all_decisions(n: int) -> np.ndarray:
    """Every 0/1 vector of length ``n`` as rows, in lexicographic order."""
    if n > MAX_ENUM_SWITCHES:
        raise ValueError(f"enumeration is capped at {MAX_ENUM_SWITCHES} switches, got {n}")
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8).reshape(-1, n)


def score_table(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """All decisions of ``grid`` and their scores (infeasible ones penalized)."""
    Y = all_decisions(grid.n_switches)
    closed = exchange_capacity(grid)
    f_closed = closed.objective if closed.feasible else None
    f = np.array([decision_score(grid, y, f_closed) for y in Y])
    return Y, f


def _probs(z, Y):
    logp = Y @ z - np.sum(softplus(z))
    return np.exp(logp)


def kl_objective(z, Y, f, beta: float) -> float:
    """KL(rho(.|z) || q_beta) from a full table of decisions and scores."""
    z = _as_scores(z)
    _check_beta(beta)
    p = _probs(z, Y)
    return float(-entropy(z) + beta * (p @ f) + logsumexp(-beta * np.asarray(f)))


def kl_gradient(z, Y, f, beta: float) -> np.ndarray:
    """Exact gradient of :func:`kl_objective` with respect to ``z``."""
    z = _as_scores(z)
    _check_beta(beta)
    p = _probs(z, Y)
    return entropy_term(z) + beta * ((p * np.asarray(f)) @ (Y - expit(z)))


def exact_objective(z, grid: Grid, beta: float) -> float:
    Y, f = score_table(grid)
    return kl_objective(z, Y, f, beta)


def exact_gradient(z, grid: Grid, beta: float) -> np.ndarray:
    Y, f = score_table(grid)
    return kl_gradient(z, Y, f, beta)


def _check_beta(beta):
    if not beta > 0:
        raise ValueError("beta must be positive")


# -- estimators ------------------------------------------------------------------


def _check_samples(z, Y, f):
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    f = np.asarray(f, dtype=np.float64).ravel()
    if len(Y) == 0 or len(Y) != len(f):
        raise ValueError("need at least one sample and one score per sample")
    if Y.shape[1] != len(z):
        raise ValueError("sample width does not match the scores")
    return Y, f


def grad_mc(z, Y, f, beta: float) -> np.ndarray:
    """Plain score-function estimate from sampled decisions ``Y`` and scores ``f``."""
    z = _as_scores(z)
    Y, f = _check_samples(z, Y, f)
    return entropy_term(z) + beta / len(f) * (f @ (Y - expit(z)))


def filter_scores(f, tau: float) -> np.ndarray:
    """Squash scores relative to the round's best: -sigmoid(-(f - min f) / tau)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    f = np.asarray(f, dtype=np.float64)
    # far from the best the sigmoid underflows; keep the value strictly negative
    return np.minimum(-expit(-(f - f.min()) / tau), -np.finfo(np.float64).smallest_subnormal)


def grad_fmc(z, Y, f, beta: float, tau: float) -> np.ndarray:
    """Score-function estimate with filtered scores."""
    z = _as_scores(z)
    Y, f = _check_samples(z, Y, f)
    return grad_mc(z, Y, filter_scores(f, tau), beta)


def grad_mt(z, y_mem, beta: float) -> np.ndarray:
    """Pull ``z`` towards ``beta * (2 y_mem - 1)``, weighted by sigmoid(z) sigmoid(-z)."""
    z = _as_scores(z)
    y_mem = np.asarray(y_mem, dtype=np.float64)
    if y_mem.shape != z.shape:
        raise ValueError("memory decision does not match the scores")
    return expit(z) * expit(-z) * (z - beta * (2.0 * y_mem - 1.0))


# -- memory table -------------------------------------------------------------------


class MemoryTable:
    """Best decision seen so far for each training context."""

    def __init__(self):
        self._best: dict[str, tuple[np.ndarray, float]] = {}

    def __len__(self):
        return len(self._best)

    def __contains__(self, context_id):
        return context_id in self._best

    def get(self, context_id) -> tuple[np.ndarray, float]:
        y, f = self._best[context_id]
        return y.copy(), f

    def update(self, context_id, candidates) -> bool:
        """Offer ``(decision, score)`` pairs; keep one only if strictly better.

        Returns True when the stored entry changed.
        """
        cands = [(np.asarray(y, dtype=np.int8), float(f)) for y, f in candidates]
        if context_id not in self._best and not cands:
            raise KeyError(f"no entry and no candidates for context {context_id!r}")
        changed = False
        for y, f in cands:
            cur = self._best.get(context_id)
            if cur is None or f < cur[1]:
                self._best[context_id] = (y.copy(), f)
                changed = True
        return changed

    def items(self):
        for k, (y, f) in self._best.items():
            yield k, y.copy(), f

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "entries": {k: {"decision": y.tolist(), "score": f} for k, (y, f) in sorted(self._best.items())},
        }

    @classmethod
    def from_dict(cls, d) -> "MemoryTable":
        if d.get("format_version") != 1:
            raise ValueError("unsupported memory table format")
        t = cls()
        for k, e in d["entries"].items():
            t._best[k] = (np.asarray(e["decision"], dtype=np.int8), float(e["score"]))
        return t

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "MemoryTable":
        return cls.from_dict(json.loads(Path(path).read_text()))
