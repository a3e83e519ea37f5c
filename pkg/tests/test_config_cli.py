import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from zkfl_sim import ConfigError, ScenarioConfig, config_from_mapping, load_scenario
from zkfl_sim.cli import main
from zkfl_sim.config import rounded_count


def test_counts_round_half_up_in_decimal():
    assert rounded_count(15, 0.1) == 2  # 1.5 exactly, not 1.4999...
    assert rounded_count(15, 0.15) == 2
    assert rounded_count(15, 0.3) == 5
    assert rounded_count(10, 0.25) == 3
    assert ScenarioConfig(n=15, gamma=0.1, mu=0.15).n_lazy == 2


@given(st.integers(1, 400), st.integers(0, 1000))
def test_rounding_matches_integer_arithmetic(n, permille):
    # n * p / 1000 rounded half-up, in exact integers
    expected = (2 * n * permille + 1000) // 2000
    assert rounded_count(n, permille / 1000) == expected


@pytest.mark.parametrize("mapping,field", [
    ({"nodes": 3}, "nodes"),
    ({"n": "15"}, "n"),
    ({"n": True}, "n"),
    ({"n": 2.5}, "n"),
    ({"mu": "high"}, "mu"),
    ({"stop_on_convergence": 1}, "stop_on_convergence"),
    ({"task": "TaskC"}, "task"),
    ({"oracle_m": 3, "oracle_f": 1}, "oracle_m"),
    ({"n": 4, "gamma": 0.5, "mu": 0.5, "stealth_nodes": 1}, "mu"),
    ({"rho": 0.2, "r": 1.0}, "rho"),
])
def test_bad_mappings_name_the_field(mapping, field):
    with pytest.raises(ConfigError) as info:
        config_from_mapping(mapping)
    assert info.value.field == field


def test_numbers_are_coerced_and_defaults_fill_in():
    cfg = config_from_mapping({"n": 5, "lr": 1, "genesis_count": None})
    assert cfg.lr == 1.0 and isinstance(cfg.lr, float)
    assert cfg.genesis == cfg.k_v
    assert config_from_mapping(cfg.to_dict()) == cfg


def test_load_scenario_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_scenario(bad)
    bad.write_text("n: [1\n")
    with pytest.raises(ConfigError):
        load_scenario(bad)


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text("n: 4\nmu: 0.25\nepochs_max: 3\nstop_on_convergence: false\n")
    return path


def test_cli_run_writes_outputs(scenario, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--scenario", str(scenario), "--out", str(out), "--emit-events",
                 "--seed", "7", "--epochs", "2"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["epochs_run"] == 2 and summary["config"]["seed"] == 7
    assert (out / "events.ndjson").read_text().count("\n") > 0
    assert "2 epochs" in capsys.readouterr().out


def test_cli_sweep_makes_one_directory_per_value(scenario, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--scenario", str(scenario), "--param", "mu",
                 "--values", "0,0.25", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["mu=0", "mu=0.25"]
    mus = [json.loads((out / d / "summary.json").read_text())["config"]["mu"]
           for d in ("mu=0", "mu=0.25")]
    assert mus == [0.0, 0.25]


@pytest.mark.parametrize("argv", [
    ["sweep", "--param", "nodes", "--values", "1"],
    ["sweep", "--param", "mu", "--values", "0,,0.1"],
    ["sweep", "--param", "mu", "--values", "0,abc"],
    ["run", "--epochs", "-1"],
])
def test_cli_config_errors_exit_two(scenario, tmp_path, argv, capsys):
    argv = argv[:1] + ["--scenario", str(scenario), "--out", str(tmp_path / "x")] + argv[1:]
    assert main(argv) == 2
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_cli_unwritable_output_exits_one(scenario, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "--scenario", str(scenario), "--out", str(blocker / "sub")]) == 1
