import json

import pytest

from osrgnn.cli import run
from osrgnn.datagen import load_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run(["gen-data", "--n", "6", "--seed", "7", "--base", "four_substations", "--out", str(out)]) == 0
    return out


def last_json(capsys):
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("{")]
    return [json.loads(ln) for ln in lines]


def test_gen_data_writes_files_and_manifest(dataset):
    assert len(list(dataset.glob("*.grid.json"))) == 6
    assert (dataset / "manifest.json").exists()
    assert len(load_dataset(dataset)) == 6


def test_gen_data_is_reproducible(dataset, tmp_path):
    assert run(["gen-data", "--n", "6", "--seed", "7", "--base", "four_substations", "--out", str(tmp_path)]) == 0
    a = json.loads((dataset / "manifest.json").read_text())
    b = json.loads((tmp_path / "manifest.json").read_text())
    assert [f["sha256"] for f in a["files"]] == [f["sha256"] for f in b["files"]]


def test_solve_bnb_prints_decision(dataset, capsys, tmp_path):
    ctx = sorted(dataset.glob("*.grid.json"))[0]
    lp_file = tmp_path / "ctx.lp"
    code = run(["solve", "--method", "bnb", "--max-openings", "6", "--gap", "0.01", "--time-limit", "600",
                "--dump-lp", str(lp_file), str(ctx)])
    assert code == 0
    rec = last_json(capsys)[0]
    assert rec["status"] == "optimal"
    assert rec["capacity_pu"] == pytest.approx(rec["capacity_mw"] / 100)
    assert len(rec["decision"]) == 18 and rec["openings"] <= 6
    assert "Minimize" in lp_file.read_text()


def test_eval_all_closed_has_zero_improvement(dataset, capsys, tmp_path):
    code = run(["eval", "--method", "all-closed", "--dataset", str(dataset), "--solver", "none",
                "--out", str(tmp_path)])
    assert code == 0
    s = last_json(capsys)[0]
    assert s["mean_improvement_pct"] == 0.0
    assert s["never_used"] == 18 and s["mean_openings"] == 0.0
    assert (tmp_path / "metrics.csv").read_text().startswith("# schema-version")


def test_report_writes_summary(dataset, tmp_path):
    code = run(["report", "--dataset", str(dataset), "--methods", "all-closed,bnb", "--solver", "bnb",
                "--max-openings", "2", "--out", str(tmp_path)])
    assert code == 0
    text = (tmp_path / "summary.csv").read_text().splitlines()
    assert text[0].startswith("# schema-version")
    assert len(text) == 4
    assert (tmp_path / "bnb_histograms.csv").exists()


def test_train_then_solve_with_gnn(dataset, tmp_path, capsys):
    run_dir = tmp_path / "run"
    code = run(["train", "--train", str(dataset), "--val", str(dataset), "--out", str(run_dir), "--max-iter", "2",
                "--val-period", "1", "--n-samples", "4", "--batch-size", "2"])
    assert code == 0
    ckpt = run_dir / "best.npz"
    ctx = sorted(dataset.glob("*.grid.json"))[:2]
    assert run(["solve", "--method", "gnn", "--checkpoint", str(ckpt)] + [str(p) for p in ctx]) == 0
    assert run(["solve", "--method", "ensemble", "--checkpoint-fmc", str(ckpt), "--checkpoint-mt", str(ckpt),
                str(ctx[0])]) == 0
    recs = last_json(capsys)
    assert len(recs) == 3


def test_config_file_values_and_overrides(dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"method": "all-closed", "dataset": str(dataset), "solver": "none"}))
    assert run(["eval", "--config", str(cfg)]) == 0
    assert last_json(capsys)[0]["method"] == "all-closed"
    assert run(["eval", "--config", str(cfg), "--method", "exhaustive", "--max-openings", "1"]) == 0
    assert last_json(capsys)[0]["method"] == "exhaustive"


def test_unknown_config_key_is_a_config_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 1.0}))
    assert run(["train", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "unknown config key" in err and len(err.strip().splitlines()) == 1


def test_missing_required_option(capsys):
    assert run(["eval"]) == 2
    assert run(["gen-data", "--n", "1"]) == 2


def test_bad_subcommand_and_missing_file(tmp_path, capsys):
    assert run(["frobnicate"]) == 2
    assert run(["solve", str(tmp_path / "missing.grid.json")]) == 2
    assert "Traceback" not in capsys.readouterr().err


def test_no_contexts_is_empty_result(tmp_path):
    assert run(["solve", "--method", "all-closed"]) == 3


def test_infeasible_context_exit_code(tmp_path, capsys):
    from osrgnn.h2mg import make_grid, save_grid

    loads = [{"port_o": 1, "P": 100.0, "in_Z1": 0, "in_Z2": 1}, {"port_o": 2, "P": 20.0, "in_Z1": 1, "in_Z2": 0}]
    g = make_grid(range(3), [{"port_o": 0, "P": 100.0, "in_Z1": 1, "in_Z2": 0}], loads, [],
                  [{"port_of": 0, "port_ot": 1, "F_bar": 150.0, "X": 0.1, "S": 1}], "island")
    save_grid(g, tmp_path / "island.grid.json")
    assert run(["solve", "--method", "all-closed", str(tmp_path / "island.grid.json")]) == 3
    assert run(["solve", "--method", "bnb", str(tmp_path / "island.grid.json")]) == 3
