"""
End-to-end estimation pipelines
===============================

- run_neuro_dse:            plain ODE-Net + hybrid filter
- run_neuro_dse_plus:       self-refined training loop (filter, retrain on filtered states, repeat)
- run_neuro_kalmannet_dse:  alternating ODE-Net / learned-gain training
- run_inertia_estimation:   joint state and VSG inertia estimation
- run_sweep:                noise / mask / control-mode / power-mix / backend grids over seeds

Every pipeline is a pure function of its configuration; given an output
directory it writes config.json, metrics.json, trajectories/,
iteration_log.csv and checkpoints/.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from neuro_dse import kalmannet, odenet
from neuro_dse.config import NOISE_INTERPRETATION, TORCH_THREADS
from neuro_dse.errors import ConfigurationError
from neuro_dse.filters import (
    FilterResult,
    HybridModel,
    NoiseSpec,
    UkfParams,
    augment_with_parameter,
    open_loop_rollout,
    run_filter,
)
from neuro_dse.kalmannet import GainNet, GainTrainingSet, LearnedGain
from neuro_dse.models import DerKind, MetricsReport, PipelineConfig, RunSummary
from neuro_dse.odenet import OdeNet, PlainObjective, RefinedObjective
from neuro_dse.plant import (
    MeasurementMap,
    PlantModel,
    Trajectory,
    build_reference_plant,
    droop_outputs,
    measurement_channels,
)
from neuro_dse.scenario_io import (
    FLOAT_FORMAT,
    Dataset,
    MeasurementMask,
    build_mask,
    compute_metrics,
    estimate_trajectory,
    generate_dataset,
    report,
    write_trajectory,
)
from utils.helpers import config_hash, dump_json

logger = logging.getLogger(__name__)

INERTIA_BAND = 0.02
INERTIA_PRIOR_STD = 0.3


# --- Shared preparation ---

@dataclass
class PreparedData:
    cfg: PipelineConfig
    plant: PlantModel
    mask: MeasurementMask
    measurement: MeasurementMap
    train: List[Trajectory]
    test: Trajectory
    x0_guess: np.ndarray
    cfg_hash: str


def prepare(cfg: PipelineConfig, dataset: Optional[Dataset] = None) -> PreparedData:
    """Nominal estimator plant, mask, data and initial guess (nominal equilibrium)"""
    plant = build_reference_plant(cfg.plant)
    mask = build_mask(plant, cfg.mask.branch_fraction, cfg.mask.seed, cfg.mask.include_secondary_signals)
    measurement = MeasurementMap(plant, measurement_channels(plant, mask))
    if dataset is None:
        dataset = generate_dataset(cfg, workers=cfg.workers)
    for traj in dataset.train + [dataset.test]:
        if tuple(traj.meas_names) != measurement.names:
            raise ConfigurationError("Dataset measurement channels do not match the configured mask")
    eq = plant.equilibrium()
    return PreparedData(
        cfg=cfg,
        plant=plant,
        mask=mask,
        measurement=measurement,
        train=dataset.train,
        test=dataset.test,
        x0_guess=np.concatenate([eq.x_ex, eq.x_in]),
        cfg_hash=config_hash(cfg.model_dump(mode="json")),
    )


def _measured_column(traj: Trajectory, state: str) -> Optional[np.ndarray]:
    channel = {"ex.i_D": "y.boundary.i_D", "ex.i_Q": "y.boundary.i_Q"}.get(state, f"y.{state}")
    if channel in traj.meas_names:
        return traj.measurements[:, traj.meas_names.index(channel)]
    return None


def measured_boundary_data(traj: Trajectory, prep: PreparedData) -> Tuple[np.ndarray, np.ndarray]:
    """
    ODE-Net training arrays from measurements: x_ex and the plain-wiring u_in

    Entries without a measured channel are held at the initial-guess value.
    """
    plant = prep.plant
    n = len(traj)
    guess_ex, guess_in = prep.x0_guess[:plant.dim_ex], prep.x0_guess[plant.dim_ex:]

    def column(state: str, fallback: float) -> np.ndarray:
        values = _measured_column(traj, state)
        return np.full(n, fallback) if values is None else values

    x_ex = np.column_stack([column(s, guess_ex[j]) for j, s in enumerate(plant.ex_layout.names)])
    u = np.column_stack([column(s, guess_in[plant.in_layout.index(s)]) for s in plant.u_in_names]) \
        if len(plant.u_in_names) else np.zeros((n, 0))
    return x_ex, u


def hybrid_model(prep: PreparedData, net: OdeNet) -> HybridModel:
    return HybridModel(prep.plant, net, prep.measurement, prep.cfg.dt)


def train_plain_odenet(prep: PreparedData, phase: str = "odenet") -> Tuple[OdeNet, List[float]]:
    cfg = prep.cfg
    data = [measured_boundary_data(t, prep) for t in prep.train]
    net = OdeNet(prep.plant.dim_ex, len(prep.plant.u_in_names), cfg.odenet.hidden_dims,
                 augmented=False, seed=cfg.odenet.seed)
    objective = PlainObjective([d[0] for d in data], [d[1] for d in data], cfg.dt, cfg.odenet.batch_len)
    return odenet.train(net, objective, cfg.odenet, phase=phase, calibrate=True)


def train_refined_odenet(prep: PreparedData, estimates: Sequence[np.ndarray], warm: Optional[OdeNet],
                         phase: str) -> Tuple[OdeNet, List[float], float]:
    """Augmented ODE-Net trained against filtered trajectories; returns (net, history, final loss)"""
    cfg = prep.cfg
    d_ex, d_in = prep.plant.dim_ex, prep.plant.dim_in
    measured = [measured_boundary_data(t, prep)[0] for t in prep.train]
    objective = RefinedObjective(
        measured,
        [e[:, d_ex:d_ex + d_in] for e in estimates],
        [e[:, :d_ex] for e in estimates],
        cfg.dt,
        cfg.odenet.batch_len,
    )
    if warm is None:
        net = OdeNet(d_ex, d_in, cfg.odenet.hidden_dims, augmented=True, seed=cfg.odenet.seed)
    else:
        net = odenet.clone(warm)
    net, history = odenet.train(net, objective, cfg.odenet, phase=phase, calibrate=warm is None)
    final = min(history) if history else odenet._loss_and_grad(net, objective, cfg.odenet.gamma)[0]
    return net, history, final


# --- Filtering ---

def _filter_kwargs(cfg: PipelineConfig) -> Dict[str, Any]:
    f = cfg.filter
    return {
        "sigma0": f.sigma0,
        "backend": f.backend,
        "joseph": f.joseph,
        "ukf_params": UkfParams(f.ukf_alpha, f.ukf_beta, f.ukf_kappa),
    }


def _filter_job(args) -> FilterResult:
    model, noise, y, x0, kwargs, gain_net = args
    _limit_threads()
    learned = LearnedGain(gain_net, model) if gain_net is not None else None
    return run_filter(model, noise, y, x0, gain_source="learned" if learned else "analytic",
                      learned_gain=learned, **kwargs)


def filter_trajectories(prep: PreparedData, model: HybridModel, trajectories: Sequence[Trajectory],
                        gain_net: Optional[GainNet] = None) -> List[FilterResult]:
    """Independent filter passes, fanned out over worker processes when cfg.workers > 1"""
    noise = NoiseSpec.for_model(model, prep.cfg.noise, prep.cfg.dt)
    kwargs = _filter_kwargs(prep.cfg)
    jobs = [(model, noise, t.measurements, prep.x0_guess, kwargs, gain_net) for t in trajectories]
    if prep.cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=prep.cfg.workers) as pool:
            return list(pool.map(_filter_job, jobs))
    return [_filter_job(job) for job in jobs]


def _limit_threads():
    import torch
    torch.set_num_threads(TORCH_THREADS)


def rel_rms_change(new: np.ndarray, old: np.ndarray) -> float:
    denom = math.sqrt(float(np.mean(old ** 2)))
    return math.sqrt(float(np.mean((new - old) ** 2))) / max(denom, 1e-12)


# --- Results ---

@dataclass
class PipelineResult:
    name: str
    cfg: PipelineConfig
    odenet: OdeNet
    filter_result: FilterResult
    estimate: Trajectory
    truth: Trajectory
    metrics: MetricsReport
    baseline: Optional[MetricsReport] = None
    open_loop: Optional[Trajectory] = None
    gainnet: Optional[GainNet] = None
    odenet_history: List[float] = field(default_factory=list)
    gainnet_history: List[float] = field(default_factory=list)
    iteration_log: List[Dict[str, Any]] = field(default_factory=list)
    converged: bool = True
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def insys_mse_total(self) -> float:
        return float(sum(self.metrics.mse_mean[s] for s in self.truth.in_names))

    def summary(self) -> RunSummary:
        return RunSummary(
            pipeline=self.name,
            seed=self.cfg.seed,
            config_hash=config_hash(self.cfg.model_dump(mode="json")),
            noise_interpretation=NOISE_INTERPRETATION,
            backend=self.filter_result.backend,
            gain_source=self.filter_result.gain_source,
            covariance_propagated=self.filter_result.covariance_propagated,
            converged=self.converged,
            estimate=self.metrics,
            open_loop=self.baseline,
            summary={"insys_mse_total": self.insys_mse_total, **self.extras},
        )

    def metrics_payload(self) -> Dict[str, Any]:
        return self.summary().model_dump(mode="json")


def frequency_deviation_end(plant: PlantModel, truth: Trajectory) -> float:
    """|omega - omega*| of the reference DER at the last sample"""
    ref = plant.reference
    row = truth.x_in[-1]
    get = lambda s: row[plant.in_layout.index(f"{ref.name}.{s}")]
    Omega = get("Omega") if f"{ref.name}.Omega" in plant.in_layout else 0.0
    e_sig = get("e") if f"{ref.name}.e" in plant.in_layout else 0.0
    omega, _ = droop_outputs(get("P"), get("Q"), ref.params, Omega, e_sig)
    return float(abs(omega - ref.params.omega_star))


def _finish(name: str, prep: PreparedData, model: HybridModel, result: FilterResult, net: OdeNet,
            **kwargs) -> PipelineResult:
    plant, test = prep.plant, prep.test
    estimate = estimate_trajectory(result.estimates, test.times, prep.cfg.dt, plant.ex_layout.names,
                                   plant.in_layout.names, model.param_names)
    truth = Trajectory(
        dt=test.dt, times=test.times, x_ex=test.x_ex, x_in=test.x_in,
        measurements=test.measurements, clean_measurements=test.clean_measurements,
        ex_names=test.ex_names, in_names=test.in_names, meas_names=test.meas_names,
        hidden=test.hidden, hidden_names=test.hidden_names, meta=dict(test.meta),
    )
    metrics = compute_metrics(estimate, truth, prep.cfg_hash)
    open_loop = None
    baseline = None
    if not model.param_names:
        rollout = open_loop_rollout(model, prep.x0_guess, len(test))
        open_loop = estimate_trajectory(rollout, test.times, prep.cfg.dt, plant.ex_layout.names,
                                        plant.in_layout.names)
        baseline = compute_metrics(open_loop, truth, prep.cfg_hash)
    extras = kwargs.pop("extras", {})
    extras.setdefault("frequency_deviation_end", frequency_deviation_end(plant, test))
    return PipelineResult(name=name, cfg=prep.cfg, odenet=net, filter_result=result, estimate=estimate,
                          truth=truth, metrics=metrics, baseline=baseline, open_loop=open_loop,
                          extras=extras, **kwargs)


# --- Pipelines ---

def run_neuro_dse(cfg: PipelineConfig, out_dir=None, dataset: Optional[Dataset] = None) -> PipelineResult:
    """Train the plain ODE-Net on measured boundary data, then filter the test measurements"""
    prep = prepare(cfg, dataset)
    net, history = train_plain_odenet(prep)
    model = hybrid_model(prep, net)
    result = filter_trajectories(prep, model, [prep.test])[0]
    out = _finish("dse", prep, model, result, net, odenet_history=history,
                  iteration_log=[{"iteration": 0, "phase": "odenet", "loss": min(history) if history else None,
                                  "change": None}])
    if out_dir is not None:
        write_run_directory(out, out_dir)
    return out


def run_neuro_dse_plus(cfg: PipelineConfig, out_dir=None, dataset: Optional[Dataset] = None) -> PipelineResult:
    """
    Self-refined loop

        1. pre-train the plain ODE-Net and filter every trajectory
        2. train the augmented ODE-Net on the filtered InSys states
        3. re-estimate; repeat 2-3 until the estimated InSys trajectory
           changes by less than convergence_tol (relative RMS)

    An unconverged run returns its lowest-loss iterate, flagged.
    """
    prep = prepare(cfg, dataset)
    d_ex, d_in = prep.plant.dim_ex, prep.plant.dim_in
    net0, history0 = train_plain_odenet(prep, phase="odenet-pretrain")
    model = hybrid_model(prep, net0)
    test_result = filter_trajectories(prep, model, [prep.test])[0]
    train_results = filter_trajectories(prep, model, prep.train)
    log = [{"iteration": 0, "phase": "pretrain", "loss": min(history0) if history0 else None, "change": None}]

    previous = test_result.estimates[:, d_ex:d_ex + d_in]
    augmented: Optional[OdeNet] = None
    best = None
    current = None
    converged = False
    for it in range(1, cfg.outer_max_iters + 1):
        augmented, history, loss = train_refined_odenet(
            prep, [r.estimates for r in train_results], augmented, phase=f"refine-{it}"
        )
        model = hybrid_model(prep, augmented)
        test_result = filter_trajectories(prep, model, [prep.test])[0]
        estimate_in = test_result.estimates[:, d_ex:d_ex + d_in]
        change = rel_rms_change(estimate_in, previous)
        log.append({"iteration": it, "phase": "refine", "loss": loss, "change": change})
        logger.info("Refinement iteration %d: loss %.4e, trajectory change %.3e", it, loss, change)
        current = (loss, it, odenet.clone(augmented), model, test_result, list(history))
        if best is None or loss < best[0]:
            best = current
        if change < cfg.convergence_tol:
            converged = True
            break
        previous = estimate_in
        if it < cfg.outer_max_iters:
            train_results = filter_trajectories(prep, model, prep.train)

    chosen = current if converged else best
    if not converged:
        logger.warning("Refinement did not converge in %d iterations; returning iteration %d",
                       cfg.outer_max_iters, chosen[1])
    loss, it, net, model, result, history = chosen
    out = _finish("dse-plus", prep, model, result, net, odenet_history=history, iteration_log=log,
                  converged=converged, extras={"selected_iteration": it})
    if out_dir is not None:
        write_run_directory(out, out_dir)
    return out


def _gain_training_set(prep: PreparedData) -> GainTrainingSet:
    n = min(prep.cfg.gainnet.n_train_trajectories, len(prep.train))
    trajs = prep.train[:n]
    return GainTrainingSet(
        states=[np.hstack([t.x_ex, t.x_in]) for t in trajs],
        measurements=[t.measurements for t in trajs],
        x0_guesses=[prep.x0_guess] * n,
    )


def run_neuro_kalmannet_dse(cfg: PipelineConfig, out_dir=None,
                            dataset: Optional[Dataset] = None) -> PipelineResult:
    """
    Alternating training of the ODE-Net and the GainNet

    Iteration 1 pre-trains the plain ODE-Net, runs the analytic EKF and
    trains the GainNet against ground-truth states. Each later iteration
    retrains the augmented ODE-Net on learned-gain estimates and then the
    GainNet (warm start, fresh optimizer) until the test estimate settles.
    """
    prep = prepare(cfg, dataset)
    d_ex, d_in = prep.plant.dim_ex, prep.plant.dim_in
    data = _gain_training_set(prep)

    net, history = train_plain_odenet(prep, phase="odenet-pretrain")
    model = hybrid_model(prep, net)
    analytic = filter_trajectories(prep, model, prep.train[:len(data.states)])
    gain = GainNet(model.n, len(model.meas_names), cfg.gainnet.hidden_dim, seed=cfg.gainnet.seed)
    gain, gain_history = kalmannet.train_gainnet(
        gain, data, model, cfg.gainnet, phase="gainnet-pretrain",
        delta_x_reference=[r.estimates - r.predictions for r in analytic],
    )
    result = filter_trajectories(prep, model, [prep.test], gain_net=gain)[0]
    log = [{"iteration": 1, "phase": "pretrain", "loss": min(gain_history) if gain_history else None,
            "change": None}]
    previous = result.estimates[:, d_ex:d_ex + d_in]
    best = (log[0]["loss"] if log[0]["loss"] is not None else math.inf, 1, net, model, gain, result,
            list(history), list(gain_history))
    current = best
    converged = cfg.outer_max_iters == 1
    augmented: Optional[OdeNet] = None

    for it in range(2, cfg.outer_max_iters + 1):
        learned = filter_trajectories(prep, model, prep.train, gain_net=gain)
        augmented, odenet_history, _ = train_refined_odenet(prep, [r.estimates for r in learned], augmented,
                                                        phase=f"odenet-iter{it}")
        model = hybrid_model(prep, augmented)
        gain = kalmannet.clone(gain)
        gain, gain_history = kalmannet.train_gainnet(gain, data, model, cfg.gainnet,
                                                     phase=f"gainnet-iter{it}", calibrate=False)
        result = filter_trajectories(prep, model, [prep.test], gain_net=gain)[0]
        estimate_in = result.estimates[:, d_ex:d_ex + d_in]
        change = rel_rms_change(estimate_in, previous)
        loss = min(gain_history) if gain_history else math.inf
        log.append({"iteration": it, "phase": "alternate", "loss": loss, "change": change})
        logger.info("Alternation iteration %d: GainNet loss %.4e, trajectory change %.3e", it, loss, change)
        current = (loss, it, odenet.clone(augmented), model, gain, result, list(odenet_history), list(gain_history))
        if loss < best[0]:
            best = current
        if change < cfg.convergence_tol:
            converged = True
            break
        previous = estimate_in

    chosen = current if converged else best
    _, it, net, model, gain, result, odenet_history, gain_history = chosen
    out = _finish("kalmannet-dse", prep, model, result, net, gainnet=gain, odenet_history=odenet_history,
                  gainnet_history=gain_history, iteration_log=log, converged=converged,
                  extras={"selected_iteration": it, "mismatch_resistance_scale": cfg.mismatch_resistance_scale})
    if out_dir is not None:
        write_run_directory(out, out_dir)
    return out


@dataclass
class InertiaResult:
    H_true: float
    times: np.ndarray
    H_hat: Dict[float, np.ndarray]
    convergence_times: Dict[float, Optional[float]]
    results: Dict[float, FilterResult]

    def payload(self, cfg: PipelineConfig) -> Dict[str, Any]:
        runs = []
        for err, H in self.H_hat.items():
            rel = np.abs(H - self.H_true) / self.H_true
            runs.append({
                "init_error": err,
                "H0": float(H[0]),
                "H_final": float(H[-1]),
                "convergence_time": self.convergence_times[err],
                "max_rel_error": float(np.max(rel)),
            })
        return {
            "pipeline": "inertia",
            "seed": cfg.seed,
            "config_hash": config_hash(cfg.model_dump(mode="json")),
            "noise_interpretation": NOISE_INTERPRETATION,
            "H_true": self.H_true,
            "band": INERTIA_BAND,
            "runs": runs,
        }


def first_entry_time(times: np.ndarray, H_hat: np.ndarray, H_true: float, band: float = INERTIA_BAND):
    inside = np.abs(H_hat - H_true) / H_true < band
    idx = np.nonzero(inside)[0]
    return float(times[idx[0]]) if len(idx) else None


def run_inertia_estimation(cfg: PipelineConfig, H_true: Optional[float] = None,
                           H_init_errors: Optional[Sequence[float]] = None, out_dir=None,
                           dataset: Optional[Dataset] = None) -> InertiaResult:
    """
    Augmented filter with the swap-slot VSG inertia as a random-walk state,
    one run per relative initial error
    """
    if cfg.plant.swap_kind is not DerKind.VSG:
        raise ConfigurationError("Inertia estimation needs plant.swap_kind = 'vsg'")
    if H_true is not None:
        cfg = cfg.model_copy(update={"plant": cfg.plant.model_copy(update={"vsg_H": H_true})}, deep=True)
    H_true = cfg.plant.vsg_H
    errors = list(cfg.H_init_errors if H_init_errors is None else H_init_errors)

    prep = prepare(cfg, dataset)
    net, _ = train_plain_odenet(prep)
    param = f"{cfg.plant.topology.swap_der}.H"
    model = augment_with_parameter(hybrid_model(prep, net), [param], cfg.noise.W_H)
    noise = NoiseSpec.for_model(model, cfg.noise, cfg.dt)
    kwargs = _filter_kwargs(cfg)
    n_state = len(prep.x0_guess)

    H_hat, times, results = {}, {}, {}
    for err in errors:
        H0 = H_true * (1.0 + err)
        x0 = np.concatenate([prep.x0_guess, [H0]])
        sigma0 = np.diag(np.concatenate([np.full(n_state, cfg.filter.sigma0), [(INERTIA_PRIOR_STD * H0) ** 2]]))
        kwargs["sigma0"] = sigma0
        res = run_filter(model, noise, prep.test.measurements, x0, **kwargs)
        results[err] = res
        H_hat[err] = res.estimates[:, -1]
        times[err] = first_entry_time(prep.test.times, H_hat[err], H_true)
        logger.info("Inertia run %+.0f%%: H0 %.3f -> %.4f, enters band at %s",
                    100 * err, H0, H_hat[err][-1], times[err])

    out = InertiaResult(H_true=H_true, times=prep.test.times, H_hat=H_hat, convergence_times=times,
                        results=results)
    if out_dir is not None:
        root = Path(out_dir)
        (root / "trajectories").mkdir(parents=True, exist_ok=True)
        (root / "config.json").write_text(dump_json(cfg.model_dump(mode="json")), encoding="utf-8")
        frame = pd.DataFrame({"t": prep.test.times})
        for err in errors:
            frame[f"H_hat[{err:+g}]"] = H_hat[err]
        frame.to_csv(root / "trajectories" / "inertia.csv", index=False, float_format=FLOAT_FORMAT)
        (root / "metrics.json").write_text(dump_json(out.payload(cfg)), encoding="utf-8")
        pd.DataFrame([{"iteration": 0, "phase": "odenet", "runs": len(errors)}]).to_csv(
            root / "iteration_log.csv", index=False)
        odenet.save_checkpoint(net, root / "checkpoints" / "odenet.json", prep.cfg_hash)
    return out


# --- Run directory ---

def write_run_directory(result: PipelineResult, out_dir) -> Path:
    root = Path(out_dir)
    traj_dir = root / "trajectories"
    ckpt_dir = root / "checkpoints"
    traj_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg_json = result.cfg.model_dump(mode="json")
    h = config_hash(cfg_json)

    (root / "config.json").write_text(dump_json(cfg_json), encoding="utf-8")
    write_trajectory(result.truth, traj_dir / "truth.csv", h)
    write_trajectory(result.estimate, traj_dir / "estimate.csv", h)
    if result.open_loop is not None:
        write_trajectory(result.open_loop, traj_dir / "open_loop.csv", h)
    result.filter_result.diagnostics_frame().to_csv(traj_dir / "diagnostics.csv", index=False,
                                                    float_format=FLOAT_FORMAT)
    pd.DataFrame(result.iteration_log).to_csv(root / "iteration_log.csv", index=False, float_format=FLOAT_FORMAT)
    odenet.save_checkpoint(result.odenet, ckpt_dir / "odenet.json", h)
    odenet.write_loss_history(result.odenet_history, ckpt_dir / "odenet_loss.csv")
    if result.gainnet is not None:
        kalmannet.save_checkpoint(result.gainnet, ckpt_dir / "gainnet.json", h)
        odenet.write_loss_history(result.gainnet_history, ckpt_dir / "gainnet_loss.csv")
    (root / "metrics.json").write_text(dump_json(result.metrics_payload()), encoding="utf-8")
    logger.info("Run directory written to %s", root)
    return root


# --- Sweeps ---

PIPELINES: Dict[str, Callable] = {
    "dse": run_neuro_dse,
    "dse-plus": run_neuro_dse_plus,
    "kalmannet-dse": run_neuro_kalmannet_dse,
}

SWEEP_DEFAULTS: Dict[str, List[Any]] = {
    "noise": [1e-6, 1e-4],
    "mask": [1.0, 0.8, 0.7],
    "control-mode": ["droop", "secondary"],
    "power-mix": ["droop", "vsg", "sg"],
    "backend": ["ekf", "ukf"],
}


def sweep_variant(cfg: PipelineConfig, grid: str, value) -> PipelineConfig:
    """Configuration for one grid point"""
    data = cfg.model_dump(mode="json")
    if grid == "noise":
        data["noise"]["measurement_var"] = float(value)
    elif grid == "mask":
        data["mask"]["branch_fraction"] = float(value)
    elif grid == "control-mode":
        data["plant"]["control_mode"] = str(value)
    elif grid == "power-mix":
        data["plant"]["swap_kind"] = str(value)
    elif grid == "backend":
        data["filter"]["backend"] = str(value)
    else:
        raise ConfigurationError(f"Unknown sweep grid '{grid}'; choose from {sorted(SWEEP_DEFAULTS)}")
    return PipelineConfig.parse(data)


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    data = cfg.model_dump(mode="json")
    data["seed"] = seed
    data["mask"]["seed"] = seed
    return PipelineConfig.parse(data)


def _pipeline_job(args) -> str:
    name, cfg_json, out_dir = args
    _limit_threads()
    PIPELINES[name](PipelineConfig.parse(cfg_json), out_dir=out_dir)
    return out_dir


def run_sweep(cfg: PipelineConfig, grid: str, out_dir, values: Optional[Sequence] = None,
              seeds: Optional[Sequence[int]] = None, pipeline: str = "dse", workers: int = 1) -> Dict[str, Path]:
    """
    One run directory per (grid value, seed) under ``out_dir/<grid>-<value>/seed-<seed>``,
    followed by a combined report in ``out_dir/report``
    """
    if pipeline not in PIPELINES:
        raise ConfigurationError(f"Unknown pipeline '{pipeline}'; choose from {sorted(PIPELINES)}")
    values = list(SWEEP_DEFAULTS.get(grid, []) if values is None else values)
    if not values:
        raise ConfigurationError(f"Unknown sweep grid '{grid}'; choose from {sorted(SWEEP_DEFAULTS)}")
    seeds = [cfg.seed] if not seeds else list(seeds)
    root = Path(out_dir)
    jobs = []
    for value in values:
        variant = sweep_variant(cfg, grid, value)
        for seed in seeds:
            run_dir = root / f"{grid}-{value}" / f"seed-{seed:03d}"
            jobs.append((pipeline, with_seed(variant, seed).model_dump(mode="json"), str(run_dir)))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for done in pool.map(_pipeline_job, jobs):
                logger.info("Finished %s", done)
    else:
        for job in jobs:
            logger.info("Finished %s", _pipeline_job(job))
    return report([root], root / "report")
