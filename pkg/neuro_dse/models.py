"""
Pydantic models for configuration and results
"""
import json
import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from neuro_dse.errors import ConfigurationError
from utils.helpers import dump_json


class DerKind(str, Enum):
    """Control family of a distributed energy resource"""
    DROOP = "droop"
    SECONDARY = "secondary"
    VSG = "vsg"
    SG = "sg"


INVERTER_KINDS = (DerKind.DROOP, DerKind.SECONDARY, DerKind.VSG)


class DerParams(BaseModel):
    """Per-DER parameters (per unit unless stated otherwise)"""
    kind: DerKind = Field(default=DerKind.DROOP, description="Control family")
    m_p: float = Field(default=0.01, gt=0, description="Active droop coefficient, pu-freq/pu-power")
    n_q: float = Field(default=0.02, gt=0, description="Reactive droop coefficient, pu-volt/pu-power")
    omega_star: float = Field(default=1.0, gt=0, description="Nominal angular speed")
    E_star: float = Field(default=1.0, gt=0, description="Nominal voltage magnitude")
    P_star: float = Field(default=0.4, description="Nominal active power")
    Q_star: float = Field(default=0.0, description="Nominal reactive power")
    omega_c: float = Field(default=31.4, gt=0, description="Power-filter cutoff, rad/s")
    K_pv: float = Field(default=0.5, ge=0, description="Voltage-PI proportional gain")
    K_iv: float = Field(default=100.0, gt=0, description="Voltage-PI integral gain")
    tau_c: float = Field(default=0.01, gt=0, description="Current-loop lag, s")
    R_c: float = Field(default=0.01, ge=0, description="Coupling resistance")
    L_c: float = Field(default=0.05, gt=0, description="Coupling reactance at nominal frequency")
    alpha: float = Field(default=10.0, ge=0, description="Secondary frequency gain")
    beta: float = Field(default=10.0, ge=0, description="Secondary voltage gain")
    a_gain: float = Field(default=5.0, ge=0, description="Scale of the frequency consensus Laplacian")
    b_gain: float = Field(default=1.0, ge=0, description="Scale of the reactive-sharing Laplacian")
    H: Optional[float] = Field(default=None, description="Inertia constant, s (VSG and SG)")
    D_damp: float = Field(default=20.0, ge=0, description="SG damping")
    X_d_prime: float = Field(default=0.2, gt=0, description="SG transient reactance")

    @model_validator(mode="after")
    def _inertia_required(self):
        if self.kind in (DerKind.VSG, DerKind.SG) and (self.H is None or self.H <= 0):
            raise ValueError(f"H > 0 is required for kind '{self.kind.value}'")
        return self

    model_config = ConfigDict(
        json_schema_extra={
            "example": {"kind": "droop", "m_p": 0.01, "n_q": 0.02, "P_star": 0.4}
        }
    )


class BranchSpec(BaseModel):
    """Series branch between two buses"""
    from_bus: int = Field(..., description="Sending bus id")
    to_bus: int = Field(..., description="Receiving bus id")
    R: float = Field(..., ge=0, description="Series resistance, pu")
    X: float = Field(..., ge=0, description="Series reactance, pu")


class LoadSpec(BaseModel):
    """Constant-impedance load (series R + jX)"""
    R_load: float = Field(..., gt=0, description="Load resistance, pu")
    X_load: float = Field(default=0.0, ge=0, description="Load reactance, pu")


def _default_branches() -> List[BranchSpec]:
    return [
        BranchSpec(from_bus=1, to_bus=2, R=0.02, X=0.05),
        BranchSpec(from_bus=3, to_bus=4, R=0.02, X=0.05),
        BranchSpec(from_bus=2, to_bus=3, R=0.03, X=0.08),
        BranchSpec(from_bus=1, to_bus=4, R=0.03, X=0.08),
        BranchSpec(from_bus=4, to_bus=5, R=0.02, X=0.06),
        BranchSpec(from_bus=5, to_bus=6, R=0.02, X=0.05),
    ]


class NmTopology(BaseModel):
    """Network structure of the networked microgrids"""
    buses: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    branches: List[BranchSpec] = Field(default_factory=_default_branches)
    loads: Dict[int, LoadSpec] = Field(
        default_factory=lambda: {
            2: LoadSpec(R_load=2.0, X_load=0.5),
            4: LoadSpec(R_load=2.5, X_load=0.6),
            6: LoadSpec(R_load=3.0, X_load=0.7),
        }
    )
    der_placements: Dict[str, int] = Field(
        default_factory=lambda: {"der1": 1, "der2": 3, "der3": 5},
        description="DER name -> bus id",
    )
    exsys_buses: List[int] = Field(default_factory=lambda: [5, 6])
    boundary_branch: Tuple[int, int] = Field(default=(4, 5), description="(InSys bus, ExSys bus)")
    comm_graph: List[Tuple[str, str]] = Field(
        default_factory=lambda: [("der1", "der2"), ("der2", "der3"), ("der1", "der3")],
        description="Undirected communication edges between inverter DERs",
    )
    reference_der: str = Field(default="der1", description="DER whose frequency defines the common frame")
    swap_der: str = Field(default="der2", description="Slot that can host droop/secondary, VSG or SG")


class LoadStep(BaseModel):
    """Admittance step on one load"""
    bus: int = Field(default=2)
    time: float = Field(default=0.1, ge=0, description="Switching time, s")
    scale: float = Field(default=1.2, gt=0, description="Multiplier on the load admittance")


class PlantConfig(BaseModel):
    """Everything needed to build a plant"""
    control_mode: Literal["droop", "secondary"] = Field(default="droop")
    swap_kind: DerKind = Field(default=DerKind.DROOP, description="Power source at the swap slot")
    topology: NmTopology = Field(default_factory=NmTopology)
    der_defaults: DerParams = Field(default_factory=DerParams)
    der_overrides: Dict[str, Dict[str, float]] = Field(
        default_factory=dict, description="Per-DER parameter overrides, e.g. {'der3': {'P_star': 0.3}}"
    )
    vsg_H: float = Field(default=2.0, gt=0, description="Inertia used when the swap slot is a VSG")
    sg_H: float = Field(default=3.0, gt=0, description="Inertia used when the swap slot is an SG")
    load_scales: Dict[int, float] = Field(default_factory=dict, description="Bus id -> admittance multiplier")
    load_step: Optional[LoadStep] = Field(default_factory=LoadStep)
    resistance_scale: float = Field(default=1.0, gt=0, description="Multiplier on every branch resistance")

    model_config = ConfigDict(
        json_schema_extra={
            "example": {"control_mode": "secondary", "swap_kind": "vsg", "resistance_scale": 1.0}
        }
    )


class NoiseConfig(BaseModel):
    """Noise levels of the plant and the estimator"""
    measurement_var: float = Field(default=1e-6, gt=0, description="Per-sample measurement variance")
    process_var: float = Field(default=1e-6, ge=0, description="Per-second process noise intensity")
    filter_W_ex: float = Field(default=1e-6, ge=0, description="Per-step variance of the ExSys block in the filter")
    filter_W_in: Optional[float] = Field(default=None, ge=0, description="Per-step InSys variance (default process_var*dt)")
    W_H: float = Field(default=1e-6, ge=0, description="Per-step random-walk variance of augmented parameters")


class MaskConfig(BaseModel):
    """Measurement availability"""
    branch_fraction: float = Field(default=1.0, gt=0, le=1.0)
    include_secondary_signals: bool = Field(default=True)
    seed: int = Field(default=0)


class FilterConfig(BaseModel):
    """Estimator options"""
    backend: Literal["ekf", "ukf"] = Field(default="ekf")
    gain_source: Literal["analytic", "learned"] = Field(default="analytic")
    sigma0: float = Field(default=1e-4, gt=0, description="Initial covariance scale")
    joseph: bool = Field(default=False, description="Use the Joseph-form covariance update")
    ukf_alpha: float = Field(default=1e-3, gt=0)
    ukf_beta: float = Field(default=2.0)
    ukf_kappa: float = Field(default=0.0)


class TrainConfig(BaseModel):
    """Training options shared by the ODE-Net and the GainNet"""
    eta: float = Field(default=5e-3, gt=0, description="Learning rate")
    gamma: float = Field(default=0.0, ge=0, description="L2 regularization coefficient")
    epochs: int = Field(default=300, ge=0)
    batch_len: Optional[int] = Field(default=100, ge=2, description="Window length; None for full horizon")
    optimizer: Literal["sgd", "momentum", "adam"] = Field(default="adam")
    seed: int = Field(default=0)
    hidden_dims: List[int] = Field(default_factory=lambda: [40, 40])
    log_every: int = Field(default=50, ge=1)
    rel_tol: float = Field(default=1e-6, ge=0, description="Stop when |dL|/L < rel_tol ...")
    patience: int = Field(default=20, ge=1, description="... for this many consecutive epochs")


class GainNetConfig(BaseModel):
    """KalmanNet gain options"""
    hidden_dim: int = Field(default=64, ge=1)
    eta: float = Field(default=1e-3, gt=0)
    gamma: float = Field(default=0.0, ge=0)
    epochs: int = Field(default=20, ge=0)
    window: int = Field(default=20, ge=1, description="Truncated BPTT window")
    clip_norm: float = Field(default=10.0, gt=0)
    optimizer: Literal["sgd", "momentum", "adam"] = Field(default="adam")
    seed: int = Field(default=0)
    n_train_trajectories: int = Field(default=8, ge=1)
    log_every: int = Field(default=5, ge=1)


class PipelineConfig(BaseModel):
    """Resolved configuration of one pipeline run"""
    plant: PlantConfig = Field(default_factory=PlantConfig)
    mismatch_resistance_scale: float = Field(
        default=1.0, gt=0, description="Resistance multiplier of the data-generating plant only"
    )
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    odenet: TrainConfig = Field(default_factory=TrainConfig)
    gainnet: GainNetConfig = Field(default_factory=GainNetConfig)
    dt: float = Field(default=1e-3, gt=0)
    horizon: float = Field(default=1.0, gt=0)
    n_train: int = Field(default=20, ge=1)
    variation_pct: float = Field(default=20.0, ge=0, lt=100)
    seed: int = Field(default=1, description="Seed of the test scenario")
    outer_max_iters: int = Field(default=10, ge=1)
    convergence_tol: float = Field(default=1e-4, gt=0)
    workers: int = Field(default=1, ge=1)
    H_init_errors: List[float] = Field(default_factory=lambda: [-0.32, -0.16, 0.16, 0.32])

    @field_validator("convergence_tol")
    @classmethod
    def _tol_not_nan(cls, value: float) -> float:
        if math.isnan(value):
            raise ValueError("convergence_tol must not be NaN")
        return value

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def train_seeds(self) -> List[int]:
        return [self.seed * 1000 + i for i in range(self.n_train)]

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        """
        Load and validate a JSON config

        Raises:
            ConfigurationError: unreadable file or invalid content
        """
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read config {path}: {e}") from e
        return cls.parse(payload)

    def to_json(self) -> str:
        """Canonical, sorted-key JSON; from_json(to_json()) reproduces the config"""
        return dump_json(self.model_dump(mode="json"))

    @classmethod
    def parse(cls, payload: dict) -> "PipelineConfig":
        try:
            return cls.model_validate(payload)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid config: {e}") from e

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "plant": {"control_mode": "droop"},
                "noise": {"measurement_var": 1e-6},
                "mask": {"branch_fraction": 0.7},
                "filter": {"backend": "ekf"},
                "seed": 1,
            }
        }
    )


class MetricsReport(BaseModel):
    """Per-state squared-error statistics of one estimate"""
    states: List[str] = Field(..., description="State names in layout order")
    mse_mean: Dict[str, float] = Field(..., description="Mean squared error per state")
    mse_max: Dict[str, float] = Field(..., description="Maximum squared error per state")
    n_samples: int = Field(..., description="Number of overlapping samples")
    config_hash: Optional[str] = Field(default=None)
    noise_interpretation: str = Field(default="")

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "states": ["der1.P"],
                "mse_mean": {"der1.P": 2.7e-05},
                "mse_max": {"der1.P": 1.1e-04},
                "n_samples": 1001,
            }
        }
    )


class RunSummary(BaseModel):
    """Content of a run directory's metrics.json"""
    pipeline: str = Field(..., description="dse, dse-plus or kalmannet-dse")
    seed: int = Field(..., description="Test-scenario seed")
    config_hash: str = Field(..., description="SHA-256 of the canonical config JSON")
    noise_interpretation: str = Field(..., description="How process_var maps to per-step covariance")
    backend: Literal["ekf", "ukf"] = Field(default="ekf")
    gain_source: Literal["analytic", "learned"] = Field(default="analytic")
    covariance_propagated: bool = Field(default=True)
    converged: bool = Field(default=True, description="False when the outer loop hit outer_max_iters")
    estimate: MetricsReport = Field(..., description="Filtered estimate against the truth")
    open_loop: Optional[MetricsReport] = Field(default=None, description="No-correction baseline")
    summary: Dict[str, Optional[float]] = Field(default_factory=dict)

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "pipeline": "dse",
                "seed": 1,
                "config_hash": "3f2a...",
                "noise_interpretation": "per-second intensity; per-step covariance = process_var*dt",
                "summary": {"insys_mse_total": 1.2e-4},
            }
        }
    )
