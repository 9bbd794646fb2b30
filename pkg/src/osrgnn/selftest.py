"""Quick oracle checks run by ``osrgnn selftest``.

Each check compares two independent routes to the same quantity on small
inputs and returns the worst discrepancy seen.
"""
from __future__ import annotations

import numpy as np

from . import exact, gnn, lp, surrogate
from .datagen import NoiseConfig, build_base_case, sample_context
from .h2mg import bus_partition, toy_grid
from .normalize import EcdfNormalizer
from .powerlp import build_exchange_lp


def check_toy_buses() -> float:
    g = toy_grid()
    return float(abs(len(bus_partition(g, [1, 1, 1, 1])) - 4) + abs(len(bus_partition(g, [1, 0, 1, 1])) - 5))


def check_lp_routes(n=5, seed=0) -> float:
    """HiGHS and the bundled tableau simplex on the same exchange LPs."""
    base = build_base_case("four_substations")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        g = sample_context(base, NoiseConfig(), rng, f"st{i}")
        y = (rng.random(g.n_switches) > 0.15).astype(np.int8)
        prob = build_exchange_lp(g, y)
        a, b = lp.solve_lp(prob, "highs"), lp.solve_lp(prob, "simplex")
        if a.status != b.status:
            return np.inf
        if a.status is lp.LpStatus.OPTIMAL:
            worst = max(worst, abs(a.objective - b.objective) / max(1.0, abs(a.objective)))
    return worst


def check_bnb_vs_enumeration(max_openings=2) -> float:
    g = sample_context(build_base_case("four_substations"), NoiseConfig(), np.random.default_rng(3), "st")
    e = exact.exhaustive_best(g, max_openings)
    b = exact.branch_and_bound(g, exact.SolverConfig(max_openings, 0.0, None))
    return float(abs(e.capacity - b.capacity) / max(1.0, abs(e.capacity)) + np.any(e.decision != b.decision))


def check_surrogate_gradient(beta=0.01, seed=0) -> float:
    g = toy_grid()
    z = np.random.default_rng(seed).normal(size=g.n_switches)
    an = surrogate.exact_gradient(z, g, beta)
    fd = np.empty_like(z)
    h = 1e-5
    for k in range(len(z)):
        e = np.zeros_like(z)
        e[k] = h
        fd[k] = (surrogate.exact_objective(z + e, g, beta) - surrogate.exact_objective(z - e, g, beta)) / (2 * h)
    return float(np.max(np.abs(an - fd) / np.maximum(np.abs(fd), 1e-6)))


def check_gnn_gradient(seed=0, probes=2) -> float:
    rng = np.random.default_rng(seed)
    base = build_base_case("four_substations")
    grids = [sample_context(base, NoiseConfig(), rng) for _ in range(10)]
    batch = gnn.make_batch(EcdfNormalizer(10).fit(grids).transform(grids[:2]))
    model = gnn.H2mgNodeModel(gnn.ModelConfig(hidden=(5,), latent_dim=4, encoding_dim=3, n_steps=5), seed=seed)
    # nonzero biases keep inputs off the kink of the leaky activation
    for k, p in model.params.items():
        if ".b" in k:
            p[...] = rng.normal(0, 0.1, size=p.shape)
    z, tape = model.forward(batch, record=True)
    u = rng.normal(size=len(z))
    grads = model.backward(tape, u)
    worst = 0.0
    for k, p in model.params.items():
        for _ in range(probes):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p[idx]
            p[idx] = old + 1e-6
            zp = model.forward(batch)
            p[idx] = old - 1e-6
            zm = model.forward(batch)
            p[idx] = old
            fd = u @ (zp - zm) / 2e-6
            an = grads[k][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


CHECKS = {
    "toy bus counts": (check_toy_buses, 0.0),
    "lp highs vs simplex": (check_lp_routes, 1e-6),
    "branch and bound vs enumeration": (check_bnb_vs_enumeration, 1e-6),
    "surrogate gradient vs finite differences": (check_surrogate_gradient, 1e-5),
    "gnn backprop vs finite differences": (check_gnn_gradient, 1e-3),
}


def run_all(emit=print) -> list[str]:
    """Run every check, emit one line each and return the names that failed."""
    failed = []
    for name, (fn, tol) in CHECKS.items():
        err = fn()
        ok = bool(err <= tol)
        emit(f"{'PASS' if ok else 'FAIL'} {name}: worst error {err:.3g} (tolerance {tol:g})")
        if not ok:
            failed.append(name)
    return failed
