import csv
import io
import json

import pytest
import yaml

from bflmec import cli, sim
from bflmec.config import ConfigError, PRESETS, ScenarioConfig, load_scenario, preset

SMALL = dict(n=6, m=2, samples=600, features=16, classes=4, difficulty=2**8, cap_n=20, phi=3,
             max_ticks=60, max_aggregations=4, settle_ticks=50)


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_presets_cover_experiment_families():
    assert {"paper-defaults", "threshold-sweep", "discard-vs-keep", "attack-iid", "attack-noniid"} <= set(PRESETS)
    cfg = preset("paper-defaults")
    assert (cfg.n, cfg.m, cfg.eta, cfg.epochs, cfg.batch, cfg.base) == (100, 2, 0.01, 5, 10, 100.0)
    for name in PRESETS:
        preset(name).validate()
    with pytest.raises(ConfigError):
        preset("nope")


def test_scenario_file_roundtrip_and_flags_win(tmp_path, scenario):
    cfg = load_scenario(scenario)
    assert cfg.phi == 3 and cfg.n == 6
    args = cli.build_parser().parse_args(["run", str(scenario), "--phi", "5", "--cap-n", "75"])
    cfg = cli.load_config(args)
    assert (cfg.phi, cfg.cap_n, cfg.n) == (5, 75, 6)
    (tmp_path / "bad.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "bad.yaml")


def test_run_writes_outputs_and_manifest(tmp_path, scenario, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", str(scenario), "--phi", "5", "--cap-n", "75", "--max-ticks", "20", "--out", str(out)])
    assert code == 0
    manifest = json.loads((out / "manifest").read_text())
    assert (manifest["config"]["phi"], manifest["config"]["cap_n"]) == (5, 75)
    assert manifest["seed"] == 0 and "weight_mode" in manifest["interpretation"]
    for name in ("metrics.csv", "aggregations.csv", "rewards.csv", "chain.dump"):
        assert (out / name).exists()
    assert "ticks=20" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, scenario):
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 2
    (tmp_path / "typo.yaml").write_text("phii: 3\n")
    assert cli.main(["run", str(tmp_path / "typo.yaml")]) == 2
    assert cli.main(["run", str(scenario), "--preset", "desk"]) == 2
    assert cli.main(["bench-sig", "--params", "toy", "--trials", "0"]) == 2
    diverge = dict(SMALL, eta=1e307, max_ticks=30)
    (tmp_path / "diverge.yaml").write_text(yaml.safe_dump(diverge))
    assert cli.main(["run", str(tmp_path / "diverge.yaml"), "--out", str(tmp_path / "d")]) == 3


def test_sweep_grid_cardinality(tmp_path, scenario):
    out = tmp_path / "sweep.csv"
    code = cli.main(["sweep", str(scenario), "--max-ticks", "15", "--out", str(out)])
    rows = rows_of(out.read_text())
    assert code == 0 and len(rows) == 12
    assert [(int(r["phi"]), int(r["N"])) for r in rows[:4]] == [(5, 50), (5, 75), (5, 100), (10, 50)]
    assert [int(r["seed"]) for r in rows] == list(range(12))
    assert all(r["status"] == "ok" for r in rows)


def test_one_cell_sweep_matches_run(scenario):
    cfg = load_scenario(scenario).replace(max_ticks=150, max_aggregations=12)
    (row,) = cli.sweep_rows(cfg, [20], [3])
    lg = sim.run(cfg).log
    assert row["final_accuracy"] == lg.accuracy_series[-1]
    assert (row["converged_event"], row["converged_tick"]) == lg.converged_at()
    assert row["aggregations"] == len(lg.accuracy_series)


def test_sweep_records_failed_cells(scenario):
    rows = cli.sweep_rows(load_scenario(scenario).replace(max_ticks=5), [20], [3, -1])
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("failed")


def test_bench_sig_columns(capsys):
    assert cli.main(["bench-sig", "--params", "toy", "--trials", "5"]) == 0
    (row,) = rows_of(capsys.readouterr().out)
    latency = [k for k in row if k.endswith("(ms)")]
    assert latency == ["Keygen (ms)", "Sign (ms)", "Verify (ms)"]
    assert all(0 < float(row[k]) < float("inf") for k in latency)
    with pytest.raises(ValueError):
        cli.bench_sig("toy", 0)


def test_attack_eval_refuses_honest_run(tmp_path, scenario, capsys):
    assert cli.main(["attack-eval", str(scenario), "--out", str(tmp_path / "a")]) == 2
    assert "no attack profile" in capsys.readouterr().err


def test_attack_eval_fixed_set(tmp_path):
    res = cli.attack_eval(preset("attack-fixed"), tmp_path, aggregations=3)
    assert [r["client"] for r in res["rewards"]] == list(range(1, 11))
    assert [r["client"] for r in res["rewards"] if r["malicious_at_end"]] == [6, 8, 9]
    assert len(rows_of((tmp_path / "detection.csv").read_text())) == 3
    assert len(rows_of((tmp_path / "cumulative_rewards.csv").read_text())) == 10


def test_rotating_attack_writes_ground_truth(tmp_path):
    cli.attack_eval(preset("attack-iid"), tmp_path, aggregations=2)
    rows = rows_of((tmp_path / "ground_truth.csv").read_text())
    assert rows and all(len(r["malicious_ids"].split()) == 3 for r in rows)
    assert [int(r["tick"]) for r in rows] == list(range(1, len(rows) + 1))


def test_dump_chain(tmp_path, scenario, capsys):
    out = tmp_path / "run"
    cli.main(["run", str(scenario), "--out", str(out)])
    capsys.readouterr()
    assert cli.main(["dump-chain", str(out), "--validate"]) == 0
    assert capsys.readouterr().out.startswith("valid height=")
    assert cli.main(["dump-chain", str(out / "chain.dump")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert json.loads(lines[0])["index"] == 0
    dump = out / "chain.dump"
    text = dump.read_text().splitlines()
    block = json.loads(text[-1])
    block["timestamp"] += 1
    text[-1] = json.dumps(block)
    dump.write_text("\n".join(text) + "\n")
    assert cli.main(["dump-chain", str(out), "--validate"]) == 1
    assert cli.main(["dump-chain", str(tmp_path / "nowhere")]) == 2


def test_default_config_matches_preset_defaults():
    cfg = ScenarioConfig()
    assert (cfg.n, cfg.m, cfg.eta, cfg.epochs, cfg.batch, cfg.base) == (100, 2, 0.01, 5, 10, 100.0)
