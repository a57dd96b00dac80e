"""Command-line parsing, overrides and exit codes"""
import json
from pathlib import Path

import pytest

from neuro_dse import main as cli
from neuro_dse.errors import ConfigurationError
from neuro_dse.main import EXIT_CONFIG, EXIT_OK, build_parser, resolve_config
from neuro_dse.models import MetricsReport, PipelineConfig, RunSummary


def _args(*argv):
    return build_parser().parse_args(list(argv))


def test_unknown_subcommand_exits_with_config_code(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["fly"])
    assert info.value.code == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err


def test_bad_number_exits_with_config_code():
    with pytest.raises(SystemExit) as info:
        cli.main(["dse", "--mask", "most"])
    assert info.value.code == EXIT_CONFIG


def test_overrides_are_applied():
    cfg = resolve_config(_args("dse", "--seed", "7", "--backend", "ukf", "--mask", "0.8", "--noise-var", "1e-4",
                               "--workers", "2"))
    assert cfg.seed == 7
    assert cfg.filter.backend == "ukf"
    assert cfg.mask.branch_fraction == 0.8
    assert cfg.noise.measurement_var == 1e-4
    assert cfg.workers == 2


def test_lists_only_belong_to_their_sweep_grid():
    with pytest.raises(ConfigurationError):
        resolve_config(_args("dse", "--mask", "0.7,0.8"))
    args = _args("sweep", "--grid", "mask", "--mask", "0.7,0.8")
    cfg = resolve_config(args)
    assert cfg.mask.branch_fraction == 1.0
    assert cli._sweep_values(args) == [0.7, 0.8]


def test_explicit_sweep_values_win():
    args = _args("sweep", "--grid", "noise", "--values", "1e-6", "1e-5", "--noise-var", "1e-4")
    assert cli._sweep_values(args) == [1e-6, 1e-5]
    assert cli._sweep_values(_args("sweep", "--grid", "backend")) is None


def test_config_file_is_loaded(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 11, "filter": {"backend": "ukf"}}), encoding="utf-8")
    cfg = resolve_config(_args("dse", "--config", str(path)))
    assert cfg.seed == 11
    assert cfg.filter.backend == "ukf"


def test_shipped_default_config_is_valid():
    cfg = PipelineConfig.from_json(Path(__file__).resolve().parents[1] / "configs" / "default.json")
    assert cfg == PipelineConfig()


def test_invalid_config_exits_with_config_code(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"dt": -1.0}), encoding="utf-8")
    assert cli.main(["dse", "--config", str(path), "--out-dir", str(tmp_path / "out")]) == EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_missing_config_exits_with_config_code(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_inertia_on_a_droop_plant_is_a_config_error(tmp_path):
    assert cli.main(["inertia", "--out-dir", str(tmp_path / "out")]) == EXIT_CONFIG


def test_report_command(tmp_path, capsys):
    run = tmp_path / "run"
    run.mkdir()
    estimate = MetricsReport(states=["ex.i_D"], mse_mean={"ex.i_D": 1e-6}, mse_max={"ex.i_D": 4e-6}, n_samples=5)
    summary = RunSummary(pipeline="dse", seed=1, config_hash="x", noise_interpretation="n", estimate=estimate)
    (run / "metrics.json").write_text(summary.model_dump_json(), encoding="utf-8")
    out = tmp_path / "report"
    assert cli.main(["report", str(run), "--out-dir", str(out)]) == EXIT_OK
    assert (out / "table.csv").exists()
    assert str(out) in capsys.readouterr().out


def test_report_without_runs_is_a_config_error(tmp_path):
    assert cli.main(["report", str(tmp_path), "--out-dir", str(tmp_path / "r")]) == EXIT_CONFIG
