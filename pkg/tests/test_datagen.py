import copy

import numpy as np
import pytest

from osrgnn.datagen import (
    DESK_SPLITS, NoiseConfig, build_base_case, generate_dataset, infer_line_groups, load_dataset, load_template,
    sample_context, verify_dataset,
)
from osrgnn.h2mg import validate_grid

BASE = build_base_case("twelve_substations")


def test_shipped_template_counts():
    g = BASE.grid
    assert len(g.substations) == 12
    assert g.n_switches == 57
    assert validate_grid(g) == []


def test_type1_and_type2_assignment():
    sizes = {s: len(i) for s, i in BASE.grid.substations.items()}
    assert sorted(s for s, k in sizes.items() if k == 4) == ["b", "c", "j"]
    assert sum(1 for k in sizes.values() if k == 5) == 9


def test_single_substation_template():
    t = load_template("twelve_substations")
    one = {"substation_types": t["substation_types"], "substations": [{"id": "b", "type": "type1", "zone": 1}],
           "thermal_limits": t["thermal_limits"], "lines": []}
    base = build_base_case(one)
    assert base.grid.n_switches == len(t["substation_types"]["type1"]["switches"])


def test_line_to_missing_substation_rejected():
    t = copy.deepcopy(load_template("twelve_substations"))
    t["lines"].append({"from": "a:P", "to": "zz:P", "X": 0.05})
    with pytest.raises(ValueError):
        build_base_case(t)


def test_unknown_template_name():
    with pytest.raises(FileNotFoundError):
        build_base_case("no_such_case")


def test_four_substation_template_is_valid():
    base = build_base_case("four_substations")
    assert validate_grid(base.grid) == []
    assert base.grid.n_switches == 18


def test_zero_noise_is_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = sample_context(BASE, NoiseConfig.zero(), rng)
        assert np.array_equal(g.generators.p, BASE.grid.generators.p)
        assert np.array_equal(g.loads.p, BASE.grid.loads.p)
        assert np.array_equal(g.lines.f_bar, BASE.grid.lines.f_bar)
        assert g.lines.in_service.all()


def test_limits_shared_within_group():
    rng = np.random.default_rng(1)
    groups = np.array(BASE.line_group)
    for _ in range(50):
        g = sample_context(BASE, NoiseConfig(), rng)
        for grp in ("Z1", "Z2", "border"):
            vals = g.lines.f_bar[groups == grp]
            assert np.all(vals == vals[0]) and vals[0] > 0


def test_inferred_groups_match_template():
    assert infer_line_groups(BASE.grid) == BASE.line_group


def test_every_context_validates():
    rng = np.random.default_rng(2)
    for _ in range(30):
        assert validate_grid(sample_context(BASE, NoiseConfig(), rng)) == []


def test_generation_total_tracks_base():
    rng = np.random.default_rng(3)
    n = 3000
    totals = np.array([sample_context(BASE, NoiseConfig(), rng).generators.p.sum() for _ in range(n)])
    base_total = BASE.grid.generators.p.sum()
    # one global draw per context dominates the class total
    assert abs(totals.mean() - base_total) < 3 * 500 / np.sqrt(n) + 1.0


def test_disconnection_counts_are_zero_one_or_two():
    rng = np.random.default_rng(4)
    counts = {int((~sample_context(BASE, NoiseConfig(), rng).lines.in_service).sum()) for _ in range(300)}
    assert counts <= {0, 1, 2}


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(sigma_L=-1)
    with pytest.raises(ValueError):
        NoiseConfig(p_one_line=0.8, p_two_lines=0.3)


def test_dataset_is_deterministic(tmp_path):
    base = build_base_case("four_substations")
    a = generate_dataset(base, NoiseConfig(), 20, 7, tmp_path / "a")
    b = generate_dataset(base, NoiseConfig(), 20, 7, tmp_path / "b")
    assert len(list((tmp_path / "a").glob("*.grid.json"))) == 20
    assert [f["sha256"] for f in a["files"]] == [f["sha256"] for f in b["files"]]
    assert verify_dataset(tmp_path / "a") == []
    assert [g.context_id for g in load_dataset(tmp_path / "a")] == [f["context_id"] for f in a["files"]]
    c = generate_dataset(base, NoiseConfig(), 20, 8, tmp_path / "c")
    assert [f["sha256"] for f in a["files"]] != [f["sha256"] for f in c["files"]]


def test_tampered_file_detected(tmp_path):
    generate_dataset(build_base_case("four_substations"), NoiseConfig(), 3, 1, tmp_path)
    victim = sorted(tmp_path.glob("*.grid.json"))[0]
    victim.write_text(victim.read_text().replace("1", "2", 1))
    assert verify_dataset(tmp_path) == [victim.name]


def test_empty_dataset(tmp_path):
    m = generate_dataset(BASE, NoiseConfig(), 0, 0, tmp_path)
    assert m["files"] == [] and m["n"] == 0
    assert load_dataset(tmp_path) == []


def test_desk_split_sizes():
    assert DESK_SPLITS == {"train": 2000, "val": 500, "test": 500}
