"""End-to-end pipelines on a short horizon"""
import json

import numpy as np
import pandas as pd
import pytest

from neuro_dse import pipelines
from neuro_dse.errors import ConfigurationError
from neuro_dse.models import DerKind, PipelineConfig, RunSummary

RUN_FILES = [
    "config.json",
    "metrics.json",
    "iteration_log.csv",
    "trajectories/truth.csv",
    "trajectories/estimate.csv",
    "trajectories/open_loop.csv",
    "trajectories/diagnostics.csv",
    "checkpoints/odenet.json",
    "checkpoints/odenet_loss.csv",
]


def _variant(cfg, **updates):
    return cfg.model_copy(update=updates, deep=True)


# --- Helpers ---

def test_rel_rms_change():
    old = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert pipelines.rel_rms_change(old, old) == 0.0
    assert pipelines.rel_rms_change(old * 1.1, old) == pytest.approx(0.1)


def test_first_entry_time():
    times = np.array([0.0, 0.1, 0.2])
    assert pipelines.first_entry_time(times, np.array([1.5, 1.99, 2.0]), 2.0) == 0.1
    assert pipelines.first_entry_time(times, np.array([1.5, 1.6, 1.7]), 2.0) is None


def test_prepare_checks_the_mask(small_cfg, small_dataset):
    masked = small_cfg.model_copy(update={"mask": small_cfg.mask.model_copy(update={"branch_fraction": 0.7})})
    with pytest.raises(ConfigurationError, match="mask"):
        pipelines.prepare(masked, small_dataset)


def test_boundary_data_comes_from_measurements(small_cfg, small_dataset):
    prep = pipelines.prepare(small_cfg, small_dataset)
    x_ex, u = pipelines.measured_boundary_data(prep.test, prep)
    names = list(prep.test.meas_names)
    assert x_ex.shape == (len(prep.test), 2)
    np.testing.assert_array_equal(x_ex[:, 1], prep.test.measurements[:, names.index("y.boundary.i_Q")])
    assert u.shape == (len(prep.test), len(prep.plant.u_in_names))
    np.testing.assert_array_equal(u[:, 0], prep.test.measurements[:, names.index("y.der1.i_D")])
    assert len(prep.x0_guess) == prep.plant.dim_ex + prep.plant.dim_in


# --- Pipelines ---

def test_neuro_dse_writes_a_run_directory(tmp_path, small_cfg, small_dataset):
    result = pipelines.run_neuro_dse(small_cfg, out_dir=tmp_path, dataset=small_dataset)
    for name in RUN_FILES:
        assert (tmp_path / name).exists(), name
    summary = RunSummary.model_validate_json((tmp_path / "metrics.json").read_text(encoding="utf-8"))
    assert summary.pipeline == "dse"
    assert summary.seed == 5
    assert summary.converged
    assert summary.open_loop is not None
    assert "ex.i_D" in summary.estimate.states
    assert summary.summary["insys_mse_total"] == pytest.approx(result.insys_mse_total)
    assert summary.summary["frequency_deviation_end"] >= 0.0
    assert PipelineConfig.from_json(tmp_path / "config.json") == small_cfg
    assert result.estimate.x_in.shape == small_dataset.test.x_in.shape
    assert len(pd.read_csv(tmp_path / "checkpoints" / "odenet_loss.csv")) == 3


def test_neuro_dse_is_deterministic(small_cfg, small_dataset):
    a = pipelines.run_neuro_dse(small_cfg, dataset=small_dataset)
    b = pipelines.run_neuro_dse(small_cfg, dataset=small_dataset)
    np.testing.assert_array_equal(a.filter_result.estimates, b.filter_result.estimates)


def test_loose_tolerance_stops_after_one_refinement(small_cfg, small_dataset):
    cfg = _variant(small_cfg, convergence_tol=1e9)
    result = pipelines.run_neuro_dse_plus(cfg, dataset=small_dataset)
    assert result.converged
    assert [row["iteration"] for row in result.iteration_log] == [0, 1]
    assert result.extras["selected_iteration"] == 1
    assert result.odenet.augmented


def test_unconverged_refinement_returns_the_best_iterate(tmp_path, small_cfg, small_dataset):
    cfg = _variant(small_cfg, convergence_tol=1e-300)
    result = pipelines.run_neuro_dse_plus(cfg, out_dir=tmp_path, dataset=small_dataset)
    assert not result.converged
    losses = {row["iteration"]: row["loss"] for row in result.iteration_log if row["iteration"] > 0}
    assert len(losses) == 2
    assert result.extras["selected_iteration"] == min(losses, key=losses.get)
    payload = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))
    assert payload["converged"] is False
    log = pd.read_csv(tmp_path / "iteration_log.csv")
    assert list(log.columns) == ["iteration", "phase", "loss", "change"]


def test_kalmannet_dse_uses_the_learned_gain(tmp_path, small_cfg, small_dataset):
    result = pipelines.run_neuro_kalmannet_dse(small_cfg, out_dir=tmp_path, dataset=small_dataset)
    assert result.gainnet is not None
    assert (tmp_path / "checkpoints" / "gainnet.json").exists()
    assert (tmp_path / "checkpoints" / "gainnet_loss.csv").exists()
    summary = RunSummary.model_validate_json((tmp_path / "metrics.json").read_text(encoding="utf-8"))
    assert summary.gain_source == "learned"
    assert summary.covariance_propagated is False
    assert [row["iteration"] for row in result.iteration_log] == [1, 2]
    assert np.all(np.isfinite(result.filter_result.estimates))


def test_selected_iterate_carries_its_own_gain_history(tmp_path, small_cfg, small_dataset):
    cfg = _variant(small_cfg, outer_max_iters=2, convergence_tol=1e-300)
    result = pipelines.run_neuro_kalmannet_dse(cfg, out_dir=tmp_path, dataset=small_dataset)
    assert not result.converged
    losses = {row["iteration"]: row["loss"] for row in result.iteration_log}
    selected = result.extras["selected_iteration"]
    assert selected == min(losses, key=losses.get)
    assert min(result.gainnet_history) == losses[selected]
    saved = pd.read_csv(tmp_path / "checkpoints" / "gainnet_loss.csv")
    np.testing.assert_allclose(saved["loss"], result.gainnet_history, rtol=1e-15)


def test_single_alternation_counts_as_converged(small_cfg, small_dataset):
    result = pipelines.run_neuro_kalmannet_dse(_variant(small_cfg, outer_max_iters=1), dataset=small_dataset)
    assert result.converged
    assert result.extras["selected_iteration"] == 1
    assert not result.odenet.augmented


# --- Inertia ---

def test_inertia_needs_a_vsg(small_cfg):
    with pytest.raises(ConfigurationError, match="vsg"):
        pipelines.run_inertia_estimation(small_cfg)


def test_inertia_runs_start_from_the_perturbed_guess(tmp_path, small_cfg):
    cfg = pipelines.sweep_variant(small_cfg, "power-mix", "vsg")
    out = pipelines.run_inertia_estimation(cfg, H_true=2.5, H_init_errors=[-0.16, 0.16], out_dir=tmp_path)
    assert out.H_true == 2.5
    assert sorted(out.H_hat) == [-0.16, 0.16]
    assert out.H_hat[-0.16][0] == pytest.approx(2.5 * 0.84)
    assert out.H_hat[0.16][0] == pytest.approx(2.5 * 1.16)
    payload = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))
    assert payload["pipeline"] == "inertia"
    assert len(payload["runs"]) == 2
    assert PipelineConfig.from_json(tmp_path / "config.json").plant.vsg_H == 2.5
    frame = pd.read_csv(tmp_path / "trajectories" / "inertia.csv")
    assert list(frame.columns) == ["t", "H_hat[-0.16]", "H_hat[+0.16]"]
    assert len(frame) == cfg.n_steps + 1


# --- Sweeps ---

def test_sweep_variants(small_cfg):
    assert pipelines.sweep_variant(small_cfg, "power-mix", "sg").plant.swap_kind is DerKind.SG
    assert pipelines.sweep_variant(small_cfg, "mask", "0.8").mask.branch_fraction == 0.8
    assert pipelines.sweep_variant(small_cfg, "control-mode", "secondary").plant.control_mode == "secondary"
    assert pipelines.sweep_variant(small_cfg, "noise", 1e-4).noise.measurement_var == 1e-4
    with pytest.raises(ConfigurationError):
        pipelines.sweep_variant(small_cfg, "weather", 1)
    seeded = pipelines.with_seed(small_cfg, 12)
    assert seeded.seed == 12 and seeded.mask.seed == 12


def test_sweep_rejects_unknown_pipeline(tmp_path, small_cfg):
    with pytest.raises(ConfigurationError):
        pipelines.run_sweep(small_cfg, "backend", tmp_path, pipeline="nope")


def test_sweep_writes_runs_and_a_report(tmp_path, small_cfg):
    outputs = pipelines.run_sweep(small_cfg, "backend", tmp_path, values=["ekf"], seeds=[5])
    assert (tmp_path / "backend-ekf" / "seed-005" / "metrics.json").exists()
    stats = pd.read_csv(outputs["boxplot_stats"])
    assert set(stats["group"]) == {"backend-ekf"}


# --- Long runs ---

@pytest.mark.slow
def test_filter_beats_the_open_loop_on_measured_states():
    cfg = PipelineConfig.parse({"horizon": 0.3, "n_train": 4, "odenet": {"epochs": 100}})
    result = pipelines.run_neuro_dse(cfg)
    measured = [s for s in result.truth.in_names if f"y.{s}" in result.truth.meas_names]
    assert measured
    for state in measured:
        assert result.metrics.mse_mean[state] < result.baseline.mse_mean[state], state
    assert result.insys_mse_total < 1e-3


@pytest.mark.slow
def test_inertia_estimate_enters_the_band_from_every_guess():
    cfg = PipelineConfig.parse({"plant": {"swap_kind": "vsg"}, "n_train": 4, "odenet": {"epochs": 100}})
    out = pipelines.run_inertia_estimation(cfg, H_init_errors=[-0.32, -0.16, 0.16, 0.32])
    for err, H_hat in out.H_hat.items():
        assert out.convergence_times[err] is not None, err
        assert abs(H_hat[-1] - out.H_true) / out.H_true < pipelines.INERTIA_BAND, err
