import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osrgnn.datagen import NoiseConfig, build_base_case, sample_context
from osrgnn.h2mg import (
    bus_partition, contract, grid_from_dict, grid_to_dict, load_grid, make_grid, neighborhood, save_grid,
    toy_grid, validate_grid,
)

from oracles import closed_edges, components, random_small_grid


def two_address(**line):
    return make_grid(
        [0, 1],
        generators=[{"port_o": 0, "P": 100.0, "in_Z1": 1, "in_Z2": 0}],
        loads=[{"port_o": 1, "P": 100.0, "in_Z1": 0, "in_Z2": 1}],
        lines=[{"port_of": 0, "port_ot": 1, "F_bar": 150.0, "X": 0.1, "S": 1, **line}],
    )


def test_minimal_grid_is_valid():
    assert validate_grid(two_address()) == []


def test_dangling_switch_port_reported():
    g = two_address()
    bad = make_grid([0, 1], generators=[{"port_o": 0, "P": 1, "in_Z1": 1, "in_Z2": 0}],
                    loads=[{"port_o": 1, "P": 1, "in_Z1": 0, "in_Z2": 1}],
                    switches=[{"port_of": 0, "port_ot": 99, "substation_id": "x"}],
                    lines=grid_to_dict(g)["lines"])
    problems = validate_grid(bad)
    assert any("dangling port" in p and "switch" in p for p in problems)


def test_both_zone_flags_reported():
    g = make_grid([0, 1], generators=[{"port_o": 0, "P": 1, "in_Z1": 1, "in_Z2": 1}],
                  loads=[{"port_o": 1, "P": 1, "in_Z1": 0, "in_Z2": 1}])
    assert any("zone flags" in p for p in validate_grid(g))


def test_inconsistent_orientation_reported():
    assert any("S=" in p for p in validate_grid(two_address(S=-1)))


def test_toy_grid_bus_counts():
    g = toy_grid()
    assert len(bus_partition(g, [1, 1, 1, 1])) == 4
    assert len(bus_partition(g, [1, 0, 1, 1])) == 5


def test_no_switches_one_bus_per_address():
    g = two_address()
    assert bus_partition(g, []) == [(0,), (1,)]


def test_decision_length_checked():
    with pytest.raises(ValueError):
        bus_partition(toy_grid(), [1, 1])


def test_switch_order_is_canonical():
    a = make_grid(range(4), switches=[{"port_of": 2, "port_ot": 3, "substation_id": "b"},
                                      {"port_of": 1, "port_ot": 0, "substation_id": "a"},
                                      {"port_of": 0, "port_ot": 1, "substation_id": "a"}])
    assert a.switches.substation == ("a", "a", "b")
    assert a.switches.port_of.tolist() == [0, 1, 2]


def test_round_trip(tmp_path):
    g = sample_context(build_base_case("twelve_substations"), NoiseConfig(), np.random.default_rng(0), "c0")
    save_grid(g, tmp_path / "c0.grid.json")
    h = load_grid(tmp_path / "c0.grid.json")
    assert grid_to_dict(h) == grid_to_dict(g)
    assert grid_to_dict(grid_from_dict(grid_to_dict(g))) == grid_to_dict(g)


def test_contract_merges_closed_switches():
    g = toy_grid()
    c, y = contract(g, np.array([1, 0, 1, 1]))
    assert c.n_addresses == 5
    assert len(y) == 1 and y[0] == 0


def test_neighborhood_lists_incident_ports():
    g = toy_grid()
    nb = neighborhood(g, 0)
    classes = sorted(c for c, _, _ in nb)
    assert classes == ["gen", "line", "switch"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partition_matches_union_find(seed):
    rng = np.random.default_rng(seed)
    g = random_small_grid(rng, max_addresses=8, max_switches=8)
    y = rng.integers(0, 2, size=g.n_switches)
    expect = components([int(a) for a in g.addresses], closed_edges(g, y))
    assert bus_partition(g, y) == expect


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_all_closed_component_count(seed):
    # |addresses| minus the edges of a spanning forest of the closed switches
    rng = np.random.default_rng(seed)
    g = random_small_grid(rng, max_addresses=8, max_switches=8)
    forest = len(set(int(a) for a in g.addresses)) - len(components(
        [int(a) for a in g.addresses], closed_edges(g, np.ones(g.n_switches))))
    assert len(bus_partition(g, g.all_closed())) == g.n_addresses - forest
