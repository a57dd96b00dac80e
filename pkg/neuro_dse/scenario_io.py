"""
Scenarios, datasets, trajectory files and metrics
=================================================

Features:
- Seeded measurement masks (70 / 80 / 100 % of InSys branches)
- Randomized training scenarios around the nominal plant
- Full-precision CSV trajectories with a JSON layout sidecar
- Manifest with seeds and SHA-256 hashes, cleaned up on failure
- Per-state squared-error metrics and multi-seed box-plot statistics
- Table-shaped reports over run directories
"""
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from neuro_dse.config import NOISE_INTERPRETATION
from neuro_dse.errors import ConfigurationError
from neuro_dse.models import DerKind, MetricsReport, NoiseConfig, PipelineConfig, PlantConfig
from neuro_dse.plant import PlantModel, Trajectory, build_reference_plant, simulate_ground_truth
from utils.helpers import config_hash, dump_json, file_sha256, make_rng

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


# --- Measurement masks ---

@dataclass(frozen=True)
class MeasurementMask:
    """Which InSys branches are measured; boundary currents always are"""
    branch_fraction: float
    selected_branches: Tuple[str, ...]
    include_secondary_signals: bool = True

    @classmethod
    def full(cls, plant: PlantModel, include_secondary_signals: bool = True) -> "MeasurementMask":
        return cls(1.0, tuple(plant.measurable_branches()), include_secondary_signals)


def mask_count(fraction: float, n_branches: int) -> int:
    """Half-up rounding of fraction * n_branches"""
    return int(math.floor(fraction * n_branches + 0.5))


def build_mask(plant: PlantModel, branch_fraction: float, seed: int,
               include_secondary_signals: bool = True) -> MeasurementMask:
    """
    Seeded branch selection; a pure function of (fraction, seed) for a given plant

    Raises:
        ConfigurationError: fraction outside (0, 1] or no InSys branch selected
    """
    if not 0.0 < branch_fraction <= 1.0:
        raise ConfigurationError(f"branch_fraction must be in (0, 1], got {branch_fraction}")
    branches = plant.measurable_branches()
    count = mask_count(branch_fraction, len(branches))
    if count < 1:
        raise ConfigurationError("Empty measurement mask: no InSys branch is measured")
    picked = make_rng(seed).choice(len(branches), size=count, replace=False)
    selected = tuple(branches[i] for i in sorted(picked))
    return MeasurementMask(branch_fraction, selected, include_secondary_signals)


# --- Trajectory files ---

def _columns(traj: Trajectory) -> Dict[str, np.ndarray]:
    cols = {"t": traj.times}
    for j, name in enumerate(traj.ex_names):
        cols[name] = traj.x_ex[:, j]
    for j, name in enumerate(traj.in_names):
        cols[name] = traj.x_in[:, j]
    for j, name in enumerate(traj.param_names):
        cols[f"param.{name}"] = traj.h_param[:, j]
    for j, name in enumerate(traj.hidden_names):
        cols[f"hidden.{name}"] = traj.hidden[:, j]
    for j, name in enumerate(traj.meas_names):
        cols[name] = traj.measurements[:, j]
        cols[f"clean.{name}"] = traj.clean_measurements[:, j]
    return cols


def write_trajectory(traj: Trajectory, path, cfg_hash: Optional[str] = None) -> Path:
    """CSV (header = layout names, full precision) plus ``<name>.layout.json``"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(_columns(traj)).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    layout = {
        "dt": traj.dt,
        "ex_names": list(traj.ex_names),
        "in_names": list(traj.in_names),
        "param_names": list(traj.param_names),
        "hidden_names": list(traj.hidden_names),
        "meas_names": list(traj.meas_names),
        "config_hash": cfg_hash,
        "meta": traj.meta,
    }
    path.with_suffix(".layout.json").write_text(dump_json(layout), encoding="utf-8")
    return path


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    try:
        layout = json.loads(path.with_suffix(".layout.json").read_text(encoding="utf-8"))
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read trajectory {path}: {e}") from e

    def block(names, prefix=""):
        if not names:
            return np.zeros((len(frame), 0))
        return frame[[prefix + n for n in names]].to_numpy(dtype=float)

    meas = layout["meas_names"]
    return Trajectory(
        dt=layout["dt"],
        times=frame["t"].to_numpy(dtype=float),
        x_ex=block(layout["ex_names"]),
        x_in=block(layout["in_names"]),
        measurements=block(meas),
        clean_measurements=block(meas, "clean."),
        ex_names=tuple(layout["ex_names"]),
        in_names=tuple(layout["in_names"]),
        meas_names=tuple(meas),
        hidden=block(layout["hidden_names"], "hidden.") if layout["hidden_names"] else None,
        hidden_names=tuple(layout["hidden_names"]),
        h_param=block(layout["param_names"], "param.") if layout["param_names"] else None,
        param_names=tuple(layout["param_names"]),
        meta=layout.get("meta", {}),
    )


def estimate_trajectory(estimates: np.ndarray, times: np.ndarray, dt: float, ex_names: Sequence[str],
                        in_names: Sequence[str], param_names: Sequence[str] = ()) -> Trajectory:
    """Wrap a filter's estimate matrix ([x_ex, x_in, h] columns) as a Trajectory"""
    d_ex, d_in = len(ex_names), len(in_names)
    n = len(estimates)
    return Trajectory(
        dt=dt,
        times=np.asarray(times[:n], float),
        x_ex=estimates[:, :d_ex],
        x_in=estimates[:, d_ex:d_ex + d_in],
        measurements=np.zeros((n, 0)),
        clean_measurements=np.zeros((n, 0)),
        ex_names=tuple(ex_names),
        in_names=tuple(in_names),
        meas_names=(),
        h_param=estimates[:, d_ex + d_in:] if param_names else None,
        param_names=tuple(param_names),
    )


# --- Scenario generation ---

def perturbed_plant_config(base: PlantConfig, variation_pct: float, rng: np.random.Generator) -> PlantConfig:
    """Scale every load admittance and every inverter P* by independent factors in [1-v, 1+v]"""
    v = variation_pct / 100.0
    if v == 0:
        return base.model_copy(deep=True)
    loads = {bus: base.load_scales.get(bus, 1.0) * rng.uniform(1 - v, 1 + v)
             for bus in sorted(base.topology.loads)}
    overrides = {name: dict(values) for name, values in base.der_overrides.items()}
    for name in sorted(base.topology.der_placements):
        if name == base.topology.swap_der and base.swap_kind is DerKind.SG:
            continue
        entry = overrides.setdefault(name, {})
        entry["P_star"] = entry.get("P_star", base.der_defaults.P_star) * rng.uniform(1 - v, 1 + v)
    return base.model_copy(update={"load_scales": loads, "der_overrides": overrides}, deep=True)


def simulate_scenario(plant_cfg: PlantConfig, noise: NoiseConfig, dt: float, n_steps: int, seed: int,
                      mask_fraction: float = 1.0, mask_seed: int = 0,
                      include_secondary_signals: bool = True) -> Trajectory:
    """Build the plant, find its operating point and simulate one noisy trajectory"""
    plant = build_reference_plant(plant_cfg)
    mask = build_mask(plant, mask_fraction, mask_seed, include_secondary_signals)
    x0 = plant.equilibrium()
    traj = simulate_ground_truth(plant, x0, dt, n_steps, noise, seed, mask)
    traj.meta.update({"seed": seed, "plant_hash": plant.hash})
    return traj


def _simulate_job(args) -> Trajectory:
    return simulate_scenario(*args)


@dataclass
class Dataset:
    train: List[Trajectory]
    test: Trajectory
    manifest: Dict = field(default_factory=dict)
    root: Optional[Path] = None


def training_plant_configs(base: PlantConfig, variation_pct: float, seeds: Sequence[int]) -> List[PlantConfig]:
    return [perturbed_plant_config(base, variation_pct, make_rng(s)) for s in seeds]


def generate_dataset(cfg: PipelineConfig, out_dir=None, n_train: Optional[int] = None,
                     variation_pct: Optional[float] = None, seeds: Optional[Sequence[int]] = None,
                     test_seed: Optional[int] = None, workers: int = 1) -> Dataset:
    """
    Simulate training scenarios (randomized within +-variation_pct) and the
    nominal test scenario; optionally write CSVs and a manifest. Training
    scenarios are simulated in worker processes when workers > 1; results
    keep seed order.

    Simulation failures remove every file written so far and re-raise.
    """
    n_train = cfg.n_train if n_train is None else n_train
    variation_pct = cfg.variation_pct if variation_pct is None else variation_pct
    seeds = list(cfg.train_seeds()[:n_train] if seeds is None else seeds)
    if len(seeds) != n_train:
        raise ConfigurationError(f"{n_train} training trajectories need {n_train} seeds, got {len(seeds)}")
    test_seed = cfg.seed if test_seed is None else test_seed

    truth_cfg = cfg.plant.model_copy(
        update={"resistance_scale": cfg.plant.resistance_scale * cfg.mismatch_resistance_scale}, deep=True
    )
    root = Path(out_dir) if out_dir is not None else None
    written: List[Path] = []
    entries = []
    m = cfg.mask

    def save(traj: Trajectory, name: str, seed: int) -> dict:
        path = write_trajectory(traj, root / f"{name}.csv", config_hash(cfg.model_dump(mode="json")))
        written.extend([path, path.with_suffix(".layout.json")])
        logger.info("Wrote %s", path)
        return {"file": path.name, "seed": seed, "sha256": file_sha256(path)}

    train: List[Trajectory] = []
    try:
        jobs = [(plant_cfg, cfg.noise, cfg.dt, cfg.n_steps, seed, m.branch_fraction, m.seed,
                 m.include_secondary_signals)
                for seed, plant_cfg in zip(seeds, training_plant_configs(truth_cfg, variation_pct, seeds))]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                train = list(pool.map(_simulate_job, jobs))
        else:
            train = [_simulate_job(job) for job in jobs]
        for i, (seed, traj) in enumerate(zip(seeds, train)):
            if root is not None:
                entries.append(save(traj, f"train_{i:03d}", seed))
        test = simulate_scenario(truth_cfg, cfg.noise, cfg.dt, cfg.n_steps, test_seed, m.branch_fraction, m.seed,
                                 m.include_secondary_signals)
        manifest = {
            "config_hash": config_hash(cfg.model_dump(mode="json")),
            "variation_pct": variation_pct,
            "noise_interpretation": NOISE_INTERPRETATION,
            "train": entries,
            "test": save(test, "test", test_seed) if root is not None else {"seed": test_seed},
        }
        if root is not None:
            manifest_path = root / "manifest.json"
            manifest_path.write_text(dump_json(manifest), encoding="utf-8")
            written.append(manifest_path)
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return Dataset(train=train, test=test, manifest=manifest, root=root)


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read manifest in {root}: {e}") from e
    train = [read_trajectory(root / entry["file"]) for entry in manifest["train"]]
    return Dataset(train=train, test=read_trajectory(root / manifest["test"]["file"]), manifest=manifest, root=root)


# --- Metrics ---

def compute_metrics(estimated: Trajectory, truth: Trajectory, cfg_hash: Optional[str] = None) -> MetricsReport:
    """
    Per-state mean and max squared error over the overlapping samples

    Raises:
        ConfigurationError: time grids disagree on the overlap or a state is missing from the truth
    """
    n = min(len(estimated), len(truth))
    if n == 0:
        raise ConfigurationError("No overlapping samples")
    if not np.allclose(estimated.times[:n], truth.times[:n], rtol=0, atol=1e-9):
        raise ConfigurationError("Estimated and true trajectories are on different time grids")

    truth_cols = {name: truth.x_ex[:n, j] for j, name in enumerate(truth.ex_names)}
    truth_cols.update({name: truth.x_in[:n, j] for j, name in enumerate(truth.in_names)})
    for j, name in enumerate(truth.param_names):
        truth_cols[f"param.{name}"] = truth.h_param[:n, j]

    est_cols = {name: estimated.x_ex[:n, j] for j, name in enumerate(estimated.ex_names)}
    est_cols.update({name: estimated.x_in[:n, j] for j, name in enumerate(estimated.in_names)})
    for j, name in enumerate(estimated.param_names):
        est_cols[f"param.{name}"] = estimated.h_param[:n, j]

    mse_mean, mse_max = {}, {}
    for name, values in est_cols.items():
        if name not in truth_cols:
            raise ConfigurationError(f"State '{name}' missing from the true trajectory")
        sq = (values - truth_cols[name]) ** 2
        mse_mean[name] = float(np.mean(sq))
        mse_max[name] = float(np.max(sq))
    return MetricsReport(
        states=list(est_cols),
        mse_mean=mse_mean,
        mse_max=mse_max,
        n_samples=n,
        config_hash=cfg_hash,
        noise_interpretation=NOISE_INTERPRETATION,
    )


def aggregate_seeds(reports: Sequence[MetricsReport], metric: str = "mse_mean") -> pd.DataFrame:
    """Median, quartiles, min and max of one metric per state across seeds"""
    if not reports:
        raise ConfigurationError("No reports to aggregate")
    rows = []
    for state in reports[0].states:
        values = np.array([getattr(r, metric)[state] for r in reports], float)
        q1, median, q3 = np.quantile(values, [0.25, 0.5, 0.75])
        rows.append({
            "state": state, "n": len(values), "median": median, "q1": q1, "q3": q3,
            "min": values.min(), "max": values.max(),
        })
    return pd.DataFrame(rows)


# --- Reports over run directories ---

def find_metrics(paths: Iterable) -> List[Path]:
    found = []
    for p in paths:
        p = Path(p)
        if p.is_file() and p.name == "metrics.json":
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(p.rglob("metrics.json")))
    return sorted(set(found))


def report(paths: Iterable, out_dir) -> Dict[str, Path]:
    """
    Tabulate metrics.json files

    Writes table.csv (run x state), boxplot_stats.csv (one row per run and
    state) and boxplot_summary.csv (median and quartiles per state within
    each group). A run under a ``seed-*`` directory belongs to the group
    named by its parent directory (one sweep point); otherwise the run is
    its own group.
    """
    files = find_metrics(paths)
    if not files:
        raise ConfigurationError("No metrics.json found")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, reports = [], []
    for path in files:
        payload = json.loads(path.read_text(encoding="utf-8"))
        if "estimate" not in payload:
            continue
        rep = MetricsReport.model_validate(payload["estimate"])
        reports.append(rep)
        run = str(path.parent)
        group = path.parent.parent.name if path.parent.name.startswith("seed-") else path.parent.name
        for state in rep.states:
            rows.append({
                "run": run,
                "group": group,
                "pipeline": payload.get("pipeline", ""),
                "seed": payload.get("seed"),
                "state": state,
                "mse_mean": rep.mse_mean[state],
                "mse_max": rep.mse_max[state],
            })
    if not rows:
        raise ConfigurationError("No estimate metrics found in the given runs")
    table = pd.DataFrame(rows)
    outputs = {
        "table": out_dir / "table.csv",
        "boxplot_stats": out_dir / "boxplot_stats.csv",
        "boxplot_summary": out_dir / "boxplot_summary.csv",
    }
    table[["run", "pipeline", "state", "mse_mean", "mse_max"]].to_csv(
        outputs["table"], index=False, float_format=FLOAT_FORMAT)
    table[["group", "run", "seed", "state", "mse_mean"]].to_csv(
        outputs["boxplot_stats"], index=False, float_format=FLOAT_FORMAT)
    summary = table.groupby(["group", "state"], sort=False)["mse_mean"].describe(percentiles=[0.25, 0.5, 0.75])
    summary = summary.rename(columns={"25%": "q1", "50%": "median", "75%": "q3"}).reset_index()
    summary.to_csv(outputs["boxplot_summary"], index=False, float_format=FLOAT_FORMAT)
    logger.info("Report over %d runs written to %s", len(reports), out_dir)
    return outputs
