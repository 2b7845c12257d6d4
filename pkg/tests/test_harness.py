import copy
import json

import numpy as np
import pytest

from leco import cli
from leco.harness import (
    RESULT_COLUMNS,
    ConfigError,
    ExperimentConfig,
    ResultTable,
    aggregate,
    emit_report,
    load_grid,
    run_dir,
    run_experiment,
    select_cells,
    sweep,
)
from leco.hierinfer import noisy_pairs
from leco.ontology import Taxonomy

BASE = {"annotation": ["LabelNew", "LabelNew"], "init": ["TrainScratch", "FinetunePrev"], "loss": [{}, {}]}
RAW = {
    "name": "tiny",
    "taxonomy": {"branching": [3, 2]},
    "data": {"dim": 4, "sigma_coarse": 2.0, "sigma_fine": 1.0, "sigma_noise": 0.5},
    "num_tps": 2,
    "budget": 120,
    "test_size": 60,
    "train": {"total_iterations": 30, "eval_every": 10, "hidden": [6]},
    "seeds": [0, 1],
    "arms": [
        {"name": "ft", **BASE},
        {"name": "relabel", **BASE, "annotation": ["LabelNew", "RelabelOld"]},
        {"name": "allfine", **BASE, "annotation": ["LabelNew", "AllFine"]},
        {"name": "st", **BASE, "loss": [{}, {"ssl": "ST-Hard", "refinement": "Condition", "use_lpl": True}]},
    ],
}


def config(**changes):
    raw = copy.deepcopy(RAW)
    raw.update(changes)
    return ExperimentConfig.from_dict(raw)


def test_aggregate_hand_computed():
    agg = aggregate([0.70, 0.72, 0.74])
    assert agg.mean == pytest.approx(0.72) and agg.std == pytest.approx(0.02)
    assert agg.format() == "0.72 ± 0.02"
    assert np.isnan(aggregate([0.5]).std) and aggregate([0.5]).format() == "0.50"


def _row(arm="a", tp=0, seed=0, acc=0.5):
    return {
        "arm": arm, "tp": tp, "seed": seed, "level": tp, "test_mAcc": acc, "val_mAcc": acc / 3,
        "best_iteration": 10, "fine_labeled": 5, "coarse_history": 0, "distinct_labeled": 5,
    }


def test_single_row_csv_and_round_trips():
    table = ResultTable([_row(acc=0.1 + 0.2)], (0,))
    lines = emit_report(table, "csv").splitlines()
    assert len(lines) == 2 and lines[0] == ",".join(RESULT_COLUMNS)
    big = ResultTable([_row(a, t, s, v) for a in "xy" for t in (0, 1) for s, v in ((0, 1 / 3), (1, 2 / 7))], (0, 1))
    csv1 = big.to_csv()
    back = ResultTable.from_csv(ResultTable.from_json(ResultTable.from_csv(csv1).to_json()).to_csv())
    assert back.to_csv() == csv1 and back.rows == big.rows


def test_aggregates_use_declared_seeds_only():
    table = ResultTable([_row(seed=s, acc=v) for s, v in ((0, 0.2), (1, 0.4), (2, 0.9))], (0, 1))
    assert table.aggregate("a", 0).mean == pytest.approx(0.3)
    assert table.aggregate("a", 0, seeds=[2]).mean == pytest.approx(0.9)
    with pytest.raises(KeyError):
        table.aggregate("a", 0, seeds=[5])


def test_text_table_layout():
    table = ResultTable([_row("m", t, s, v) for t in (0, 1) for s, v in ((0, 0.70), (1, 0.72), (2, 0.74))], (0, 1, 2))
    text = emit_report(table, "text")
    assert text.splitlines()[0].split() == ["arm", "TP0", "TP1"]
    assert "0.72 ± 0.02" in text
    assert "72.00 ± 2.00" in emit_report(table, "text", scale=100)
    with pytest.raises(ValueError):
        emit_report(ResultTable(), "csv")
    with pytest.raises(ValueError):
        emit_report(table, "xml")


@pytest.mark.parametrize(
    "change",
    [
        {"arms": []},
        {"seeds": []},
        {"num_tps": 3},
        {"budget": [10]},
        {"taxonomy": {"branching": [3, 2], "level_sizes": [3, 6]}},
        {"arms": [{"name": "x", **BASE, "init": ["FinetunePrev", "FinetunePrev"]}]},
        {"arms": [{"name": "x", **BASE, "init": ["TrainScratch", "FreezePrev"], "loss": [{}, {"ssl": "ST-Soft"}]}]},
        {"arms": [{"name": "x", **BASE, "loss": [{}, {"ssl": "nope"}]}]},
        {"arms": [{"name": "x", **BASE, "loss": [{}, {"refinement": "Filter"}]}]},
        {"train": {"total_iterations": -1}},
        {"bogus": 1},
    ],
)
def test_invalid_configs(change):
    with pytest.raises(ConfigError):
        config(**change)


def test_resolved_config_round_trips():
    cfg = config()
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.config_hash() == cfg.config_hash() and again.to_dict() == cfg.to_dict()
    assert cfg.replace(seeds=(9,)).config_hash() == cfg.config_hash()
    assert cfg.replace(test_size=61).config_hash() != cfg.config_hash()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    cfg = config()
    return cfg, out, run_experiment(cfg, out=out)


def test_rows_metadata_and_artifacts(tiny_run):
    cfg, out, table = tiny_run
    assert len(table) == 4 * 2 * (1 + 2)
    assert table.arms() == ["ft", "relabel", "allfine", "st"]
    md = {(r["arm"], r["tp"]): r for r in table.rows if r["seed"] == 0 and r["level"] == r["tp"]}
    assert md["ft", 1]["distinct_labeled"] == 240 and md["relabel", 1]["distinct_labeled"] == 120
    assert md["allfine", 1]["fine_labeled"] == 240 and md["ft", 1]["fine_labeled"] == 120
    assert md["ft", 1]["coarse_history"] == 96 and md["relabel", 1]["coarse_history"] == 0
    root = run_dir(cfg, out)
    assert (root / "results.csv").read_text() == table.to_csv()
    for seed in cfg.seeds:
        d = root / str(seed)
        assert json.loads((d / "config.json").read_text()) == cfg.to_dict()
        arms = json.loads((d / "arms.json").read_text())
        assert len({keys[0] for keys in arms.values()}) == 1  # TP 0 trained once
        stage = d / "tp1" / arms["st"][1]
        assert (stage / "log.csv").exists() and (stage / "model" / "params.bin").exists()


def test_shared_prefix_rows_agree(tiny_run):
    _, _, table = tiny_run
    for seed in (0, 1):
        tp0 = {table.value(a, 0, seed) for a in table.arms()}
        assert len(tp0) == 1


def test_run_is_deterministic(tiny_run, tmp_path):
    cfg, _, table = tiny_run
    assert run_experiment(cfg, out=tmp_path).to_csv() == table.to_csv()


def test_arm_results_do_not_depend_on_other_arms(tiny_run, tmp_path):
    _, _, table = tiny_run
    solo = run_experiment(config(arms=[RAW["arms"][3]]), persist=False)
    assert solo.rows == [r for r in table.rows if r["arm"] == "st"]


def test_sweep_single_cell_matches_run(tiny_run, tmp_path):
    cfg, _, table = tiny_run
    res = sweep(cfg, [{"lr": cfg.train.base_lr, "weight_decay": cfg.train.weight_decay}], out=tmp_path)
    assert res.table.to_csv() == table.to_csv()


def test_sweep_grid_size_and_validation_only_selection(tmp_path):
    cfg = config(seeds=[0], arms=[RAW["arms"][0]])
    grid = load_grid({"lr": [0.3, 0.1, 0.03], "weight_decay": [1e-3, 1e-4]})
    assert len(grid) == 6
    res = sweep(cfg, grid, out=tmp_path)
    assert len(res.selection_log) == 6
    assert all("test_mAcc" not in r for r in res.selection_log)
    best = max(res.selection_log, key=lambda r: r["val_mAcc"])
    assert res.selected["ft"]["lr"] == best["lr"] and res.selected["ft"]["weight_decay"] == best["weight_decay"]
    assert sum(r["selected"] for r in res.selection_log) == 1
    sel = next(tmp_path.glob("sweep-*/selection.csv")).read_text()
    assert "test" not in sel


def test_select_cells_ties_go_to_the_first_cell():
    rows = [{"arm": "a", "cell": c, "val_mAcc": v} for c, v in ((0, 0.5), (1, 0.7), (2, 0.7))]
    assert select_cells(rows)["a"]["cell"] == 1
    with pytest.raises(ConfigError):
        load_grid({"lr": [], "weight_decay": [0.1]})


# -- CLI -----------------------------------------------------------------------------------


def test_cli_run_and_report(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    raw = copy.deepcopy(RAW)
    raw["arms"] = raw["arms"][:1]
    path.write_text(json.dumps(raw))
    assert cli.main(["run", "--config", str(path), "--seeds", "3", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr()
    assert "TP0" in out.out and json.loads(out.err.strip().splitlines()[-1])["status"] == "ok"
    for fmt in ("csv", "json", "text"):
        assert cli.main(["report", "--in", str(tmp_path / "o"), "--format", fmt]) == 0
    text = capsys.readouterr().out
    assert "arm,tp,seed" in text and '"columns"' in text


def test_cli_errors_are_structured(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"taxonomy": {"branching": [2, 2]}}))
    assert cli.main(["run", "--config", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["status"] == "error" and err["kind"] == "config"
    assert cli.main(["report", "--in", str(tmp_path / "missing.csv")]) == 3
    with pytest.raises(SystemExit) as exc:
        cli.main(["run"])
    assert exc.value.code == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["kind"] == "usage"


def test_cli_infer_hierarchy(tmp_path, capsys):
    tax = Taxonomy.random([4, 11], np.random.default_rng(0))
    pairs, _ = noisy_pairs(tax, 1, 40, 0.05, np.random.default_rng(1))
    pairs.save(tmp_path / "pairs.txt")
    assert cli.main(["infer-hierarchy", "--pairs", str(tmp_path / "pairs.txt"), "--out", str(tmp_path / "t.txt")]) == 0
    got = Taxonomy.load(tmp_path / "t.txt", strict=False)
    np.testing.assert_array_equal(got.parent_maps[0], tax.parent_maps[0])


def test_cli_gen_data(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"dim": 3, "taxonomy": {"branching": [2, 2]}, "sizes": [8, 8], "test_size": 4}))
    assert cli.main(["gen-data", "--spec", str(spec), "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    lines = (tmp_path / "d" / "data.csv").read_text().splitlines()
    assert len(lines) == 1 + 20 and lines[0].startswith("feature_0,feature_1,feature_2,label_level_0")
