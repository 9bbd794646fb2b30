"""Hyper heterogeneous multi-graph model of a grid context.

A grid is a set of integer addresses with four classes of hyper-edges
attached to them: generators and loads (one port ``o``), switches and
lines (two ports ``of``/``ot``).  Decisions and scores are plain numpy
vectors aligned with the grid's switch ordering.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

CLASSES = ("gen", "load", "switch", "line")
PORTS = {"gen": ("o",), "load": ("o",), "switch": ("of", "ot"), "line": ("of", "ot")}
GRID_FORMAT_VERSION = 1


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype).reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Injections:
    """Generators or loads: one port, active power in MW and zone flags."""

    port: np.ndarray
    p: np.ndarray
    in_z1: np.ndarray
    in_z2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "port", _frozen(self.port, np.int64))
        object.__setattr__(self, "p", _frozen(self.p, np.float64))
        object.__setattr__(self, "in_z1", _frozen(self.in_z1, bool))
        object.__setattr__(self, "in_z2", _frozen(self.in_z2, bool))

    def __len__(self):
        return len(self.port)

    @classmethod
    def empty(cls) -> "Injections":
        return cls([], [], [], [])


@dataclass(frozen=True)
class Switches:
    port_of: np.ndarray
    port_ot: np.ndarray
    substation: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "port_of", _frozen(self.port_of, np.int64))
        object.__setattr__(self, "port_ot", _frozen(self.port_ot, np.int64))
        object.__setattr__(self, "substation", tuple(str(s) for s in self.substation))

    def __len__(self):
        return len(self.port_of)

    @classmethod
    def empty(cls) -> "Switches":
        return cls([], [], ())


@dataclass(frozen=True)
class Lines:
    """Transmission lines.

    ``s`` is +1 for a Z1 -> Z2 border line, -1 for Z2 -> Z1 and 0 otherwise.
    Out-of-service lines stay in the container with ``in_service = False``.
    """

    port_of: np.ndarray
    port_ot: np.ndarray
    f_bar: np.ndarray
    x: np.ndarray
    s: np.ndarray
    in_service: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "port_of", _frozen(self.port_of, np.int64))
        object.__setattr__(self, "port_ot", _frozen(self.port_ot, np.int64))
        object.__setattr__(self, "f_bar", _frozen(self.f_bar, np.float64))
        object.__setattr__(self, "x", _frozen(self.x, np.float64))
        object.__setattr__(self, "s", _frozen(self.s, np.int8))
        object.__setattr__(self, "in_service", _frozen(self.in_service, bool))

    def __len__(self):
        return len(self.port_of)

    @classmethod
    def empty(cls) -> "Lines":
        return cls([], [], [], [], [], [])


@dataclass(frozen=True)
class Grid:
    addresses: np.ndarray
    generators: Injections = field(default_factory=Injections.empty)
    loads: Injections = field(default_factory=Injections.empty)
    switches: Switches = field(default_factory=Switches.empty)
    lines: Lines = field(default_factory=Lines.empty)
    context_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "addresses", _frozen(self.addresses, np.int64))

    @property
    def n_addresses(self) -> int:
        return len(self.addresses)

    @property
    def n_switches(self) -> int:
        return len(self.switches)

    @cached_property
    def _lookup(self):
        order = np.argsort(self.addresses, kind="stable")
        return self.addresses[order], order

    def index_of(self, ports) -> np.ndarray:
        """Map address ids to their positions in ``addresses``.

        Raises KeyError for ids that are not addresses of the grid.
        """
        ports = np.asarray(ports, dtype=np.int64)
        sorted_ids, order = self._lookup
        if len(sorted_ids) == 0:
            if ports.size:
                raise KeyError("grid has no addresses")
            return ports.copy()
        pos = np.clip(np.searchsorted(sorted_ids, ports), 0, len(sorted_ids) - 1)
        if np.any(sorted_ids[pos] != ports):
            missing = sorted(set(ports[sorted_ids[pos] != ports].tolist()))
            raise KeyError(f"unknown addresses {missing}")
        return order[pos]

    @cached_property
    def ports(self) -> dict:
        """Address positions for every (class, port) pair."""
        return {
            ("gen", "o"): self.index_of(self.generators.port),
            ("load", "o"): self.index_of(self.loads.port),
            ("switch", "of"): self.index_of(self.switches.port_of),
            ("switch", "ot"): self.index_of(self.switches.port_ot),
            ("line", "of"): self.index_of(self.lines.port_of),
            ("line", "ot"): self.index_of(self.lines.port_ot),
        }

    @cached_property
    def substations(self) -> dict:
        """Switch indices grouped by substation id, in first-seen order."""
        groups: dict[str, list[int]] = {}
        for i, sub in enumerate(self.switches.substation):
            groups.setdefault(sub, []).append(i)
        return {k: np.array(v, dtype=np.int64) for k, v in groups.items()}

    def all_closed(self) -> np.ndarray:
        return np.ones(self.n_switches, dtype=np.int8)

    @property
    def total_generation(self) -> float:
        return float(self.generators.p.sum())

    def with_context_id(self, context_id: str) -> "Grid":
        return replace(self, context_id=str(context_id))


def switch_order(port_of, port_ot, substation) -> np.ndarray:
    """Canonical switch order: by substation id, then (port_of, port_ot)."""
    keys = list(zip(substation, np.asarray(port_of).tolist(), np.asarray(port_ot).tolist()))
    return np.array(sorted(range(len(keys)), key=lambda i: keys[i]), dtype=np.int64)


def make_grid(
    addresses: Iterable[int],
    generators: Sequence[Mapping] = (),
    loads: Sequence[Mapping] = (),
    switches: Sequence[Mapping] = (),
    lines: Sequence[Mapping] = (),
    context_id: str = "",
) -> Grid:
    """Build a grid from per-object records, using the serialized field names.

    Switches are put in canonical order.  Missing ``in_service`` defaults to
    True and missing ``S`` to 0.
    """

    def inj(records):
        return Injections(
            [r["port_o"] for r in records],
            [r["P"] for r in records],
            [bool(r["in_Z1"]) for r in records],
            [bool(r["in_Z2"]) for r in records],
        )

    sw_of = [r["port_of"] for r in switches]
    sw_ot = [r["port_ot"] for r in switches]
    sw_sub = [str(r.get("substation_id", "")) for r in switches]
    order = switch_order(sw_of, sw_ot, sw_sub)
    sw = Switches(
        np.asarray(sw_of, dtype=np.int64)[order] if len(order) else [],
        np.asarray(sw_ot, dtype=np.int64)[order] if len(order) else [],
        tuple(sw_sub[i] for i in order),
    )
    ln = Lines(
        [r["port_of"] for r in lines],
        [r["port_ot"] for r in lines],
        [r["F_bar"] for r in lines],
        [r["X"] for r in lines],
        [r.get("S", 0) for r in lines],
        [bool(r.get("in_service", True)) for r in lines],
    )
    return Grid(np.array(sorted(set(addresses)), dtype=np.int64), inj(generators), inj(loads), sw, ln, str(context_id))


# -- validation ------------------------------------------------------------


def _address_zones(grid: Grid) -> dict:
    zones: dict[int, set] = {}
    for inj in (grid.generators, grid.loads):
        for a, z1, z2 in zip(inj.port.tolist(), inj.in_z1.tolist(), inj.in_z2.tolist()):
            if z1 != z2:
                zones.setdefault(a, set()).add(1 if z1 else 2)
    return {a: next(iter(z)) for a, z in zones.items() if len(z) == 1}


def validate_grid(grid: Grid) -> list[str]:
    """Check the grid invariants; an empty list means the grid is valid."""
    problems = []
    known = set(grid.addresses.tolist())
    if len(known) != grid.n_addresses:
        problems.append("addresses: duplicate address ids")
    if np.any(grid.addresses < 0):
        problems.append("addresses: negative address id")

    def check_ports(cls, name, ports):
        for i, a in enumerate(ports.tolist()):
            if a not in known:
                problems.append(f"{cls}[{i}].{name}: dangling port to address {a}")

    for cls, inj in (("gen", grid.generators), ("load", grid.loads)):
        check_ports(cls, "port_o", inj.port)
        for i in np.flatnonzero(inj.in_z1 == inj.in_z2):
            problems.append(f"{cls}[{i}]: zone flags must have exactly one of in_Z1, in_Z2 set")
        for i in np.flatnonzero(~np.isfinite(inj.p)):
            problems.append(f"{cls}[{i}]: non-finite P")
    check_ports("switch", "port_of", grid.switches.port_of)
    check_ports("switch", "port_ot", grid.switches.port_ot)
    if len(grid.switches.substation) != grid.n_switches:
        problems.append("switch: substation ids do not match switch count")
    ln = grid.lines
    check_ports("line", "port_of", ln.port_of)
    check_ports("line", "port_ot", ln.port_ot)
    for i in np.flatnonzero(ln.in_service & ~(ln.x > 0)):
        problems.append(f"line[{i}]: in-service line needs X > 0")
    for i in np.flatnonzero(ln.in_service & ~(ln.f_bar > 0)):
        problems.append(f"line[{i}]: in-service line needs F_bar > 0")
    for i in np.flatnonzero(~np.isin(ln.s, (-1, 0, 1))):
        problems.append(f"line[{i}]: S must be -1, 0 or +1")

    # S consistency where both ends carry injections of a single zone
    zones = _address_zones(grid)
    for i, (a, b, s) in enumerate(zip(ln.port_of.tolist(), ln.port_ot.tolist(), ln.s.tolist())):
        if a in zones and b in zones:
            expected = 0 if zones[a] == zones[b] else (1 if zones[a] == 1 else -1)
            if s != expected:
                problems.append(f"line[{i}]: S={s} inconsistent with zones of its ends (expected {expected})")
    return problems


# -- topology ---------------------------------------------------------------


def check_decision(grid: Grid, decision) -> np.ndarray:
    y = np.asarray(decision)
    if y.ndim != 1 or len(y) != grid.n_switches:
        raise ValueError(f"decision has shape {y.shape}, grid has {grid.n_switches} switches")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("decision entries must be 0 or 1")
    return y.astype(np.int8)


def bus_labels(grid: Grid, decision) -> np.ndarray:
    """Component label per address position (closed switches merge addresses)."""
    y = check_decision(grid, decision)
    n = grid.n_addresses
    closed = y == 1
    rows = grid.ports["switch", "of"][closed]
    cols = grid.ports["switch", "ot"][closed]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def bus_partition(grid: Grid, decision) -> list[tuple[int, ...]]:
    """Electrical buses as sorted tuples of address ids, sorted by first member."""
    labels = bus_labels(grid, decision)
    groups: dict[int, list[int]] = {}
    for a, lab in zip(grid.addresses.tolist(), labels.tolist()):
        groups.setdefault(lab, []).append(a)
    return sorted(tuple(sorted(g)) for g in groups.values())


def contract(grid: Grid, decision) -> tuple[Grid, np.ndarray]:
    """Merge addresses joined by closed switches.

    Each bus is represented by its smallest address id.  Open switches are
    kept (relabelled); closed ones disappear.  Returns the contracted grid
    and the decision restricted to the surviving switches.
    """
    y = check_decision(grid, decision)
    labels = bus_labels(grid, y)
    rep = {}
    for a, lab in zip(grid.addresses.tolist(), labels.tolist()):
        rep[lab] = min(rep.get(lab, a), a)
    new_id = np.array([rep[lab] for lab in labels], dtype=np.int64)

    def relabel(ports):
        return new_id[grid.index_of(ports)] if len(ports) else ports

    g, ld, sw, ln = grid.generators, grid.loads, grid.switches, grid.lines
    keep = np.flatnonzero(y == 0)
    out = Grid(
        np.array(sorted(set(rep.values())), dtype=np.int64),
        Injections(relabel(g.port), g.p, g.in_z1, g.in_z2),
        Injections(relabel(ld.port), ld.p, ld.in_z1, ld.in_z2),
        Switches(relabel(sw.port_of)[keep], relabel(sw.port_ot)[keep], tuple(sw.substation[i] for i in keep)),
        Lines(relabel(ln.port_of), relabel(ln.port_ot), ln.f_bar, ln.x, ln.s, ln.in_service),
        grid.context_id,
    )
    return out, y[keep]


def neighborhood(grid: Grid, address: int) -> list[tuple[str, int, str]]:
    """All (class, edge index, port) triples whose port points at ``address``."""
    pos = int(grid.index_of([address])[0])
    out = []
    for (cls, port), idx in grid.ports.items():
        out.extend((cls, int(e), port) for e in np.flatnonzero(idx == pos))
    return sorted(out, key=lambda t: (CLASSES.index(t[0]), t[1], t[2]))


# -- serialization ------------------------------------------------------------


def grid_to_dict(grid: Grid) -> dict:
    def inj(x: Injections):
        return [
            {"port_o": int(a), "P": float(p), "in_Z1": bool(z1), "in_Z2": bool(z2)}
            for a, p, z1, z2 in zip(x.port, x.p, x.in_z1, x.in_z2)
        ]

    sw, ln = grid.switches, grid.lines
    return {
        "format_version": GRID_FORMAT_VERSION,
        "context_id": grid.context_id,
        "addresses": grid.addresses.tolist(),
        "generators": inj(grid.generators),
        "loads": inj(grid.loads),
        "switches": [
            {"port_of": int(a), "port_ot": int(b), "substation_id": s}
            for a, b, s in zip(sw.port_of, sw.port_ot, sw.substation)
        ],
        "lines": [
            {"port_of": int(a), "port_ot": int(b), "F_bar": float(f), "X": float(x), "S": int(s), "in_service": bool(on)}
            for a, b, f, x, s, on in zip(ln.port_of, ln.port_ot, ln.f_bar, ln.x, ln.s, ln.in_service)
        ],
    }


def grid_from_dict(d: Mapping) -> Grid:
    version = d.get("format_version", GRID_FORMAT_VERSION)
    if version != GRID_FORMAT_VERSION:
        raise ValueError(f"unsupported grid format version {version}")
    return make_grid(
        d["addresses"], d.get("generators", ()), d.get("loads", ()), d.get("switches", ()), d.get("lines", ()),
        d.get("context_id", ""),
    )


def save_grid(grid: Grid, path) -> None:
    Path(path).write_text(json.dumps(grid_to_dict(grid), indent=1) + "\n")


def load_grid(path) -> Grid:
    return grid_from_dict(json.loads(Path(path).read_text()))


def decision_to_dict(context_id: str, decision) -> dict:
    return {"context_id": context_id, "decision": [int(v) for v in np.asarray(decision)]}


def toy_grid() -> Grid:
    """Eight-address example with four switches.

    All-closed gives four buses, ``{0,1,2}``, ``{3,4}``, ``{5,6}`` and ``{7}``;
    opening the second switch splits ``{0,1,2}`` and gives five.
    """
    return make_grid(
        range(8),
        generators=[{"port_o": 0, "P": 1.0, "in_Z1": 1, "in_Z2": 0},
                    {"port_o": 2, "P": 0.5, "in_Z1": 1, "in_Z2": 0}],
        loads=[{"port_o": 4, "P": 0.6, "in_Z1": 0, "in_Z2": 1},
               {"port_o": 7, "P": 0.8, "in_Z1": 0, "in_Z2": 1}],
        switches=[{"port_of": 0, "port_ot": 1, "substation_id": "A"},
                  {"port_of": 1, "port_ot": 2, "substation_id": "A"},
                  {"port_of": 3, "port_ot": 4, "substation_id": "B"},
                  {"port_of": 5, "port_ot": 6, "substation_id": "B"}],
        lines=[{"port_of": 0, "port_ot": 3, "F_bar": 0.5, "X": 0.1, "S": 1},
               {"port_of": 2, "port_ot": 5, "F_bar": 0.5, "X": 0.1, "S": 1},
               {"port_of": 6, "port_ot": 7, "F_bar": 0.6, "X": 0.1, "S": 0},
               {"port_of": 4, "port_ot": 7, "F_bar": 0.4, "X": 0.2, "S": 0}],
        context_id="toy",
    )
