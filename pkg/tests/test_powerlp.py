import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osrgnn.datagen import build_base_case
from osrgnn.h2mg import contract, grid_from_dict, grid_to_dict, make_grid, toy_grid
from osrgnn.lp import LpStatus
from osrgnn.powerlp import DegenerateContext, build_exchange_lp, dump_lp, exchange_capacity, solve_exchange

from oracles import dc_capacity, random_small_grid

GEN = {"port_o": 0, "P": 100.0, "in_Z1": 1, "in_Z2": 0}
LINE = {"port_of": 0, "port_ot": 1, "F_bar": 150.0, "X": 0.1, "S": 1}


def two_address(switches=()):
    load_at = 2 if switches else 1
    return make_grid(range(load_at + 1), [GEN], [{"port_o": load_at, "P": 100.0, "in_Z1": 0, "in_Z2": 1}],
                     list(switches), [LINE])


def count(prob, sense):
    return sum(1 for s in prob.senses if s == sense)


def test_two_address_layout():
    p = build_exchange_lp(two_address(), [])
    assert p.var_names == ("lambda", "theta_0", "theta_1")
    assert count(p, "<=") == 2
    assert count(p, "=") == 3  # two balances and the phase fix


def test_closed_switch_adds_four_rows():
    g = two_address([{"port_of": 1, "port_ot": 2, "substation_id": "s"}])
    p = build_exchange_lp(g, [1])
    assert "F_0" in p.var_names
    assert count(p, "<=") == 2 + 4
    M = g.total_generation
    flow_rows = [i for i, n in enumerate(p.row_names) if "flow" in n]
    assert np.allclose(p.b[flow_rows], M)
    ang_rows = [i for i, n in enumerate(p.row_names) if "ang" in n]
    assert np.allclose(p.b[ang_rows], 0.0)


def test_zero_border_objective():
    g = make_grid(range(2), [GEN], [{"port_o": 1, "P": 100.0, "in_Z1": 0, "in_Z2": 1}], [], [{**LINE, "S": 0}])
    assert not np.any(build_exchange_lp(g, []).c)
    for method in ("highs", "simplex"):
        res = exchange_capacity(g, method=method)
        assert res.capacity == 0.0 and math.copysign(1, res.capacity) > 0
        assert res.solution.lambda_ == pytest.approx(1.0)


@pytest.mark.parametrize("method", ["highs", "simplex"])
def test_single_line_saturates(method):
    res = exchange_capacity(two_address(), method=method)
    assert res.capacity == pytest.approx(150.0)
    assert res.capacity_pu == pytest.approx(1.5)
    assert res.solution.lambda_ == pytest.approx(1.5)
    assert res.solution.theta[0] == 0.0


def test_open_series_switch_leaves_only_zero_transfer():
    # with lambda >= 0 a pure Z2-load island balances at lambda = mu = 0
    g = two_address([{"port_of": 1, "port_ot": 2, "substation_id": "s"}])
    res = exchange_capacity(g, [0])
    assert res.feasible and res.capacity == 0.0
    assert res.solution.lambda_ == pytest.approx(0.0, abs=1e-9)
    assert dc_capacity(g, [0]) == pytest.approx(0.0)


def test_switch_flow_capped_by_default_m():
    g = two_address([{"port_of": 1, "port_ot": 2, "substation_id": "s"}])
    assert exchange_capacity(g, [1]).capacity == pytest.approx(100.0)
    assert exchange_capacity(g, [1], M=1e6).capacity == pytest.approx(150.0)


def test_island_with_fixed_demand_is_infeasible():
    loads = [{"port_o": 1, "P": 100.0, "in_Z1": 0, "in_Z2": 1}, {"port_o": 2, "P": 20.0, "in_Z1": 1, "in_Z2": 0}]
    g = make_grid(range(3), [GEN], loads, [{"port_of": 1, "port_ot": 2, "substation_id": "s"}], [LINE])
    res = exchange_capacity(g, [0])
    assert res.status is LpStatus.INFEASIBLE and res.capacity is None
    assert dc_capacity(g, [0]) is None
    assert exchange_capacity(g, [1]).feasible


def test_zero_z2_load_rejected():
    g = make_grid(range(2), [GEN], [{"port_o": 1, "P": 0.0, "in_Z1": 0, "in_Z2": 1}], [], [LINE])
    with pytest.raises(DegenerateContext):
        build_exchange_lp(g, [])


def test_bad_decision_and_m():
    with pytest.raises(ValueError):
        build_exchange_lp(toy_grid(), [1, 1])
    with pytest.raises(ValueError):
        build_exchange_lp(toy_grid(), [1, 1, 1, 1], M=0.0)


def test_toy_capacity_and_dump():
    assert exchange_capacity(toy_grid()).capacity == pytest.approx(0.875)
    assert exchange_capacity(toy_grid()).capacity == pytest.approx(dc_capacity(toy_grid(), [1, 1, 1, 1]))
    text = dump_lp(toy_grid())
    assert "Minimize" in text and "phase_ref" in text


def _check_solution(grid, y, res, M):
    sol = res.solution
    sw, ln = grid.switches, grid.lines
    dth = sol.theta[sw.port_of] - sol.theta[sw.port_ot]
    assert np.all(np.abs(dth) <= M * (1 - y) + 1e-6)
    assert np.all(np.abs(sol.switch_flows) <= M * y + 1e-6)
    assert np.all(np.abs(sol.line_flows) <= ln.f_bar + 1e-6)
    assert sol.theta[int(np.argmin(grid.addresses))] == pytest.approx(0.0, abs=1e-12)
    # nodal balance
    g, ld = grid.generators, grid.loads
    inj = np.zeros(grid.n_addresses)
    np.add.at(inj, g.port, np.where(g.in_z1, sol.lambda_, 1.0) * g.p)
    np.add.at(inj, ld.port, -np.where(ld.in_z2, sol.mu, 1.0) * ld.p)
    out = np.zeros(grid.n_addresses)
    np.add.at(out, sw.port_of, sol.switch_flows)
    np.add.at(out, sw.port_ot, -sol.switch_flows)
    np.add.at(out, ln.port_of, sol.line_flows)
    np.add.at(out, ln.port_ot, -sol.line_flows)
    assert np.max(np.abs(inj - out)) <= 1e-6


def test_twelve_substation_residuals():
    g = build_base_case("twelve_substations").grid
    y = g.all_closed()
    res = exchange_capacity(g, y)
    assert res.feasible
    _check_solution(g, y, res, g.total_generation)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_dc_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_small_grid(rng)
    y = rng.integers(0, 2, size=g.n_switches)
    M = 1e4 * g.total_generation
    res = exchange_capacity(g, y, M=M)
    ref = dc_capacity(g, y)
    if ref is None:
        assert res.status is LpStatus.INFEASIBLE
    elif ref == math.inf:
        assert res.status is LpStatus.UNBOUNDED
    else:
        assert res.feasible
        assert res.capacity == pytest.approx(ref, rel=1e-5, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_feasible_solutions_satisfy_constraints(seed):
    rng = np.random.default_rng(seed)
    g = random_small_grid(rng, max_switches=5)
    y = rng.integers(0, 2, size=g.n_switches).astype(float)
    res = exchange_capacity(g, y)
    if res.feasible:
        _check_solution(g, y, res, g.total_generation)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 3.0))
def test_raising_limits_never_hurts(seed, c):
    rng = np.random.default_rng(seed)
    g = random_small_grid(rng)
    y = rng.integers(0, 2, size=g.n_switches)
    M = 1e4 * g.total_generation
    base = exchange_capacity(g, y, M=M)
    d = grid_to_dict(g)
    for line in d["lines"]:
        line["F_bar"] *= c
    wider = exchange_capacity(grid_from_dict(d), y, M=M)
    if base.feasible:
        assert wider.status is LpStatus.UNBOUNDED or wider.capacity >= base.capacity - 1e-6 * max(1, base.capacity)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contraction_invariance(seed):
    rng = np.random.default_rng(seed)
    g = random_small_grid(rng)
    y = g.all_closed()
    c, rest = contract(g, y)
    assert len(rest) == 0
    M = 1e4 * g.total_generation
    a, b = exchange_capacity(g, y, M=M), exchange_capacity(c, rest, M=M)
    assert a.status == b.status
    if a.feasible:
        assert a.capacity == pytest.approx(b.capacity, rel=1e-6, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_default_m_never_exceeds_loose_m(seed):
    # the default big-M also caps switch flows, so it can only cut capacity
    rng = np.random.default_rng(seed)
    g = random_small_grid(rng)
    y = rng.integers(0, 2, size=g.n_switches)
    tight, loose = exchange_capacity(g, y), exchange_capacity(g, y, M=1e4 * g.total_generation)
    if tight.feasible:
        assert loose.status is LpStatus.UNBOUNDED or tight.capacity <= loose.capacity + 1e-6 * max(1, loose.capacity)


def test_simplex_and_highs_agree_on_base_case():
    g = build_base_case("four_substations").grid
    y = g.all_closed()
    a = solve_exchange(g, y, method="highs")
    b = solve_exchange(g, y, method="simplex")
    assert a.capacity == pytest.approx(b.capacity, rel=1e-6)
