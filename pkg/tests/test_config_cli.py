from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from armopo import cli
from armopo.config import ConfigError, grid_cells, load_config, parse_config
from armopo.metrics import MetricReport
from armopo.seeding import derive_seed

TINY = {
    "env": "pendulum",
    "seed": 3,
    "regimes": ["random", "medium"],
    "data": {
        "n_steps": 400,
        "expert_train_steps": 300,
        "medium_max_train_steps": 300,
        "medium_eval_every": 100,
        "medium_eval_episodes": 1,
        "n_ref_episodes": 2,
        "sac": {"hidden": [8], "start_steps": 100, "batch_size": 16},
    },
    "model": {
        "kinds": ["dmdn", "darmdn", "ensemble"],
        "base": {"epochs": 2, "batch_size": 64},
        "grid": {"hidden": [8, 12]},
    },
    "metrics": {"l_max": 3, "n_population": 4, "n_starts": 3, "n_traces": 2},
    "agent": {
        "models": ["dmdn", "darmdn", "ensemble"],
        "grid": {"lam": [1.0], "horizon": [2], "heuristic": ["ma"]},
        "base": {
            "n_batches": 6, "eval_every": 3, "eval_episodes": 1, "rollout_starts": 4, "rollout_every": 3,
            "sac": {"hidden": [8], "batch_size": 8},
        },
        "seeds": [0, 1, 2],
        "final_eval_episodes": 1,
    },
}

COMMANDS = ("gen-data", "train-model", "eval-model", "run-mopo", "correlate", "export-plots")


def _write(tmp_path, obj, name="cfg.json") -> str:
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


@pytest.mark.parametrize(
    "raw",
    [
        {"bogus": 1},
        {"data": {"n_step": 5}},
        {"model": {"grid": {"width": [3]}}},
        {"model": {"kinds": ["gp"]}},
        {"agent": {"grid": {"lam": []}}},
        {"agent": {"base": {"alpha": 1}}},
        {"agent": {"grid": {"lam": [-1.0]}}},
        {"agent": {"models": ["ensemble"]}, "model": {"kinds": ["dmdn"]}},
        {"regimes": ["expert"]},
        {"env": "cartpole"},
        {"metrics": {"l_max": 20, "extra": True}},
        {"data": {"sac": {"layers": 2}}},
    ],
)
def test_schema_violations_rejected(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_cli_exits_2_before_any_compute(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["gen-data", "--config", _write(tmp_path, {"data": {"oops": 1}}), "--out", str(out)])
    assert code == cli.EXIT_CONFIG
    assert not out.exists()
    assert cli.main(["train-model", "--config", str(tmp_path / "missing.json"), "--out", str(out)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["correlate", "--config", str(bad), "--out", str(out)]) == 2


def test_missing_inputs_are_config_errors(tmp_path):
    cfg = _write(tmp_path, TINY)
    assert cli.main(["train-model", "--config", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_defaults_and_roundtrip(tmp_path):
    cfg = parse_config({})
    assert cfg.model.selection == "lr"
    assert parse_config(cfg.to_dict()).to_dict() == cfg.to_dict()
    loaded = load_config(_write(tmp_path, TINY))
    assert [c.hidden for c in loaded.model.cells("dmdn")] == [8, 12]
    assert loaded.mopo_configs()[0].sac.hidden == (8,)


def test_grid_cells_order():
    assert grid_cells({"b": [1, 2], "a": ["x"]}) == [{"a": "x", "b": 1}, {"a": "x", "b": 2}]
    assert grid_cells({}) == [{}]


def test_seed_derivation_is_label_based():
    assert derive_seed(0, "model", "dmdn") == derive_seed(0, "model", "dmdn")
    assert derive_seed(0, "model", "dmdn") != derive_seed(0, "model", "darmdn")
    assert derive_seed(0, "a") != derive_seed(1, "a")


def _run_all(tmp_path, out: Path):
    cfg = _write(tmp_path, TINY)
    for command in COMMANDS:
        assert cli.main([command, "--config", cfg, "--out", str(out)]) == cli.EXIT_OK, command


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    a, b = base / "a", base / "b"
    _run_all(base, a)
    _run_all(base, b)
    return a, b


def test_end_to_end_layout(tiny_runs):
    out, _ = tiny_runs
    man = json.loads((out / "gen_data_manifest.json").read_text())
    assert {Path(f["path"]).name for f in man["files"]} >= {f"{r}.armd" for r in ("random", "medium", "medium_replay", "medium_expert")}
    for kind in ("dmdn", "darmdn", "ensemble"):
        base = out / "models" / "medium" / kind
        reports = [MetricReport.from_json((base / f"cell_{i}" / "report.json").read_text()) for i in range(2)]
        sel = json.loads((base / "selected.json").read_text())
        lrs = [r.aggregate["lr"] for r in reports]
        assert sel["cell"] == max(range(2), key=lambda i: lrs[i])
        for rep in reports:
            assert set(rep.per_dim) >= {"r2", "log_likelihood", "lr", "or", "ks"}
            assert len(rep.curves["r2"]) == 3
        scores = json.loads((out / "mopo" / "medium" / kind / "scores.json").read_text())
        cell = scores["cells"][scores["best_cell"]]
        assert len(cell["normalized"]) == 3
        assert cell["normalized_ci90"] >= 0
    res = json.loads((out / "mopo" / "medium" / "darmdn" / "cell_0" / "seed_0" / "result.json").read_text())
    assert res["config"]["heuristic"] == "sigma"
    ens = json.loads((out / "mopo" / "medium" / "ensemble" / "cell_0" / "seed_0" / "result.json").read_text())
    assert ens["config"]["heuristic"] == "ma"


def test_correlation_table_matches_analysis(tiny_runs):
    from armopo.analysis import correlate_study, table_csv

    out, _ = tiny_runs
    cfg = parse_config(TINY)
    text = (out / "analysis" / "correlation.csv").read_text()
    assert text == table_csv(correlate_study(cli._records(cfg, out)))
    rows = list(csv.DictReader(text.splitlines()))
    assert len(rows) == 2 * 8 * 2


def test_plot_exports(tiny_runs):
    out, _ = tiny_runs
    with open(out / "plots" / "medium_dmdn_long_horizon.csv") as f:
        assert len(list(csv.reader(f))) == 1 + 3
    with open(out / "plots" / "medium_dmdn_histograms.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4 * 20
    assert (out / "plots" / "medium_darmdn_training_curve.csv").exists()


def test_reruns_are_byte_identical(tiny_runs):
    a, b = tiny_runs
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_seed_flag_overrides_config(tmp_path):
    cfg = dict(TINY, regimes=["random"])
    out = tmp_path / "o"
    assert cli.main(["gen-data", "--config", _write(tmp_path, cfg), "--out", str(out), "--seed", "11"]) == 0
    man = json.loads((out / "gen_data_manifest.json").read_text())
    assert man["config"]["seed"] == 11
