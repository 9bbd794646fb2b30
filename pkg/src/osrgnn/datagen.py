"""Base-case instantiation and randomized context sampling.

A base-case template is a JSON document describing substation types
(internal nodes and switches), the substations with their zone, the lines
between substation nodes and the base injections.  See
``osrgnn/data/four_substations.json`` for the layout.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .h2mg import Grid, Injections, Lines, load_grid, make_grid, save_grid, validate_grid
from .powerlp import exchange_capacity

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MAX_REDRAWS = 100
LINE_GROUPS = ("Z1", "Z2", "border")
DESK_SPLITS = {"train": 2000, "val": 500, "test": 500}
PAPER_SPLITS = {"large_train": 850_000, "small_train": 10_000, "val": 100_000, "test": 10_000}


@dataclass(frozen=True)
class NoiseConfig:
    sigma_L: float = 50.0
    sigma_Z: float = 200.0
    sigma_T: float = 500.0
    sigma_F: float = 50.0
    p_one_line: float = 0.6
    p_two_lines: float = 0.1

    def __post_init__(self):
        if min(self.sigma_L, self.sigma_Z, self.sigma_T, self.sigma_F) < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if self.p_one_line < 0 or self.p_two_lines < 0 or self.p_one_line + self.p_two_lines > 1:
            raise ValueError("disconnection probabilities must be >= 0 and sum to at most 1")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class BaseCase:
    """Base grid plus the thermal-limit group of each line."""

    grid: Grid
    line_group: tuple
    name: str = ""

    def __post_init__(self):
        if len(self.line_group) != len(self.grid.lines):
            raise ValueError("one thermal-limit group per line is required")
        if any(g not in LINE_GROUPS for g in self.line_group):
            raise ValueError(f"line groups must be in {LINE_GROUPS}")


def _template_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return p
    res = resources.files("osrgnn") / "data" / f"{name_or_path}.json"
    if not res.is_file():
        raise FileNotFoundError(f"no base-case template named {name_or_path!r}")
    return Path(str(res))


def load_template(name_or_path) -> dict:
    return json.loads(_template_path(name_or_path).read_text())


def build_base_case(template) -> BaseCase:
    """Instantiate a template (dict, packaged name or path) into a base case."""
    t = load_template(template) if not isinstance(template, Mapping) else template
    types = t["substation_types"]
    subs = t["substations"]
    zone_of = {}
    addr = {}
    switches = []
    nxt = 0
    for s in subs:
        sid, typ = s["id"], s["type"]
        if typ not in types:
            raise ValueError(f"substation {sid!r} has unknown type {typ!r}")
        if s["zone"] not in (1, 2):
            raise ValueError(f"substation {sid!r}: zone must be 1 or 2")
        zone_of[sid] = s["zone"]
        for node in types[typ]["nodes"]:
            addr[f"{sid}:{node}"] = nxt
            nxt += 1
        for a, b in types[typ]["switches"]:
            switches.append({"port_of": addr[f"{sid}:{a}"], "port_ot": addr[f"{sid}:{b}"], "substation_id": sid})

    def where(ref, what):
        if ref not in addr:
            raise ValueError(f"{what} references unknown node {ref!r}")
        return addr[ref], zone_of[ref.split(":")[0]]

    limits = t["thermal_limits"]
    lines, groups = [], []
    for i, ln in enumerate(t["lines"]):
        a, za = where(ln["from"], f"line {i}")
        b, zb = where(ln["to"], f"line {i}")
        group = f"Z{za}" if za == zb else "border"
        s = 0 if za == zb else (1 if za == 1 else -1)
        lines.append({"port_of": a, "port_ot": b, "F_bar": limits[group], "X": ln["X"], "S": s})
        groups.append(group)

    def injections(records, what):
        out = []
        for r in records:
            a, z = where(r["at"], what)
            out.append({"port_o": a, "P": r["P"], "in_Z1": z == 1, "in_Z2": z == 2})
        return out

    grid = make_grid(range(nxt), injections(t.get("generators", []), "generator"),
                     injections(t.get("loads", []), "load"), switches, lines, context_id="base")
    problems = validate_grid(grid)
    if problems:
        raise ValueError("template produces an invalid grid: " + "; ".join(problems))
    return BaseCase(grid, tuple(groups), t.get("name", ""))


def infer_line_groups(grid: Grid) -> tuple:
    """Thermal-limit groups for a grid without template metadata.

    Border lines are those with S != 0; internal lines take the zone of the
    injections reachable from their ends without crossing the border.
    """
    n = grid.n_addresses
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    P = grid.ports
    edges = list(zip(P["switch", "of"].tolist(), P["switch", "ot"].tolist()))
    internal = grid.lines.s == 0
    edges += list(zip(P["line", "of"][internal].tolist(), P["line", "ot"][internal].tolist()))
    for a, b in edges:
        parent[find(a)] = find(b)
    zone = {}
    for inj, key in ((grid.generators, ("gen", "o")), (grid.loads, ("load", "o"))):
        for a, z1 in zip(P[key].tolist(), inj.in_z1.tolist()):
            zone.setdefault(find(a), 1 if z1 else 2)
    out = []
    for a, s in zip(P["line", "of"].tolist(), grid.lines.s.tolist()):
        out.append("border" if s != 0 else f"Z{zone.get(find(a), 1)}")
    return tuple(out)


def _positive_normal(rng, mean, sigma, what):
    for _ in range(MAX_REDRAWS):
        v = rng.normal(mean, sigma)
        if v > 0:
            return v
    raise RuntimeError(f"{what}: {MAX_REDRAWS} redraws without a positive value")


def _sample_class(inj: Injections, noise: NoiseConfig, rng, what) -> np.ndarray:
    p0 = inj.p
    masks = (inj.in_z1, inj.in_z2)
    zone_base = [float(np.sum(p0[m])) for m in masks]
    for k, tot in enumerate(zone_base):
        if tot <= 0:
            raise ValueError(f"{what}: zone Z{k + 1} needs a positive base total")
    local = np.empty_like(p0)
    local_sum = []
    for k, m in enumerate(masks):
        for _ in range(MAX_REDRAWS):
            draw = rng.normal(p0[m], noise.sigma_L)
            if np.sum(draw) > 0:
                break
        else:
            raise RuntimeError(f"{what}: local draws of zone Z{k + 1} never summed positive")
        local[m] = draw
        local_sum.append(float(np.sum(draw)))
    eps_zone = [_positive_normal(rng, zone_base[k], noise.sigma_Z, f"{what} zone Z{k + 1}") for k in range(2)]
    # class total taken as the sum of zone totals (same value, keeps the
    # zero-noise case an exact identity)
    eps_total = _positive_normal(rng, zone_base[0] + zone_base[1], noise.sigma_T, f"{what} total")
    total_ratio = eps_total / (eps_zone[0] + eps_zone[1])
    out = np.empty_like(p0)
    for k, m in enumerate(masks):
        out[m] = local[m] * ((eps_zone[k] / local_sum[k]) * total_ratio)
    return out


def sample_context(base: BaseCase, noise: NoiseConfig, rng, context_id: str = "") -> Grid:
    """Draw one randomized operating condition around ``base``."""
    if isinstance(base, Grid):
        base = BaseCase(base, infer_line_groups(base))
    g = base.grid
    gen_p = _sample_class(g.generators, noise, rng, "generators")
    load_p = _sample_class(g.loads, noise, rng, "loads")

    groups = np.array(base.line_group)
    f_bar = g.lines.f_bar.copy()
    for grp in LINE_GROUPS:
        m = groups == grp
        if m.any():
            ref = float(g.lines.f_bar[m][0])
            f_bar[m] = _positive_normal(rng, ref, noise.sigma_F, f"thermal limit {grp}")

    in_service = g.lines.in_service.copy()
    u = rng.random()
    n_out = 1 if u < noise.p_one_line else (2 if u < noise.p_one_line + noise.p_two_lines else 0)
    candidates = np.flatnonzero(in_service)
    n_out = min(n_out, len(candidates))
    if n_out:
        in_service[rng.choice(candidates, size=n_out, replace=False)] = False

    ln = g.lines
    return replace(
        g,
        generators=Injections(g.generators.port, gen_p, g.generators.in_z1, g.generators.in_z2),
        loads=Injections(g.loads.port, load_p, g.loads.in_z1, g.loads.in_z2),
        lines=Lines(ln.port_of, ln.port_ot, f_bar, ln.x, ln.s, in_service),
        context_id=str(context_id),
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(base: BaseCase, noise: NoiseConfig, n: int, seed: int, out_dir, *,
                     prefix: str = "ctx", stream: int = 0) -> dict:
    """Write ``n`` contexts plus ``manifest.json`` to ``out_dir``.

    Context ``i`` uses its own generator seeded by ``(seed, stream, i)``, so
    files are reproducible individually and in any order.  Contexts whose
    all-closed topology is infeasible are flagged, not dropped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(n):
        rng = np.random.default_rng([seed, stream, i])
        cid = f"{prefix}{i:06d}"
        grid = sample_context(base, noise, rng, cid)
        name = f"{cid}.grid.json"
        save_grid(grid, out / name)
        res = exchange_capacity(grid)
        files.append({
            "file": name,
            "context_id": cid,
            "sha256": _sha256(out / name),
            "all_closed_feasible": res.feasible,
            "all_closed_capacity": res.capacity,
        })
    manifest = {
        "format_version": 1,
        "base": base.name,
        "seed": seed,
        "stream": stream,
        "n": n,
        "noise": asdict(noise),
        "files": files,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    flagged = sum(not f["all_closed_feasible"] for f in files)
    if flagged:
        log.warning("%d of %d contexts have an infeasible all-closed topology", flagged, n)
    return manifest


def load_dataset(path) -> list[Grid]:
    """Load the grids listed in a dataset manifest (or a single grid file)."""
    p = Path(path)
    if p.is_file():
        return [load_grid(p)]
    manifest = json.loads((p / MANIFEST).read_text())
    return [load_grid(p / f["file"]) for f in manifest["files"]]


def verify_dataset(path) -> list[str]:
    """Return the files whose checksum no longer matches the manifest."""
    p = Path(path)
    manifest = json.loads((p / MANIFEST).read_text())
    return [f["file"] for f in manifest["files"] if _sha256(p / f["file"]) != f["sha256"]]
