"""
Kalman filtering over the hybrid physics/neural process model
=============================================================

Features:
- HybridModel: x_ex advanced by the ODE-Net, x_in by the InSys physics G,
  both with one RK4 step of the same dt; optional parameter block with
  random-walk dynamics (joint state/parameter estimation)
- EKF predict/gain/correct, UKF step through the same one-step map
- Learned-gain correction path (gain supplied by a GainNet runner)
- LinearGaussianModel and a closed-form Kalman filter for reference runs

Filters only talk to a process model through ``step``, ``jacobian``,
``measure``, ``measure_jacobian``, ``layout`` and ``meas_names``.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as la

from neuro_dse import odenet as odenet_ops
from neuro_dse.errors import ConfigurationError, FilterDivergenceError
from neuro_dse.models import NoiseConfig
from neuro_dse.odenet import OdeNet
from neuro_dse.plant import MeasurementMap, PartitionedState, PlantModel, StateLayout, rk4_step

logger = logging.getLogger(__name__)

STATE_LIMIT = 1e6
ILL_CONDITIONED = 1e12
CHOLESKY_JITTER = (0.0, 1e-10, 1e-8)


class ProcessModel(Protocol):
    layout: StateLayout
    meas_names: Tuple[str, ...]

    def step(self, x: np.ndarray, k: int) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray, k: int) -> np.ndarray: ...

    def measure(self, x: np.ndarray, k: int) -> np.ndarray: ...

    def measure_jacobian(self, x: np.ndarray, k: int) -> np.ndarray: ...


@dataclass
class FilterState:
    """Posterior x_{k|k}, Sigma_k at step k"""
    x: np.ndarray
    sigma: np.ndarray
    k: int
    split: Optional[Tuple[int, int]] = None

    @property
    def x_hat(self) -> PartitionedState:
        d_ex, d_in = self.split or (0, len(self.x))
        rest = self.x[d_ex + d_in:]
        return PartitionedState(
            x_ex=self.x[:d_ex], x_in=self.x[d_ex:d_ex + d_in], h_param=rest if len(rest) else None
        )


@dataclass
class NoiseSpec:
    """Process covariance W (per step) and measurement covariance R"""
    W: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, float))
        self.R = np.atleast_2d(np.asarray(self.R, float))
        for name, M in (("W", self.W), ("R", self.R)):
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
                raise ConfigurationError(f"{name} must be square and symmetric")
            if np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise ConfigurationError(f"{name} must be positive semidefinite")
        if np.any(np.diag(self.R) <= 0):
            raise ConfigurationError("R must have a strictly positive diagonal")

    @classmethod
    def for_model(cls, model: "HybridModel", noise: NoiseConfig, dt: float) -> "NoiseSpec":
        d_ex, d_in, d_h = model.dims
        w_in = noise.process_var * dt if noise.filter_W_in is None else noise.filter_W_in
        W = np.diag(np.concatenate([
            np.full(d_ex, noise.filter_W_ex),
            np.full(d_in, w_in),
            np.full(d_h, model.param_noise if model.param_noise is not None else noise.W_H),
        ]))
        return cls(W=W, R=noise.measurement_var * np.eye(len(model.meas_names)))


class HybridModel:
    """
    One-step map of the physics-neural model

        x_ex' = RK4_F(x_ex, u)           u = x_in[u_idx] (plain) or x_in (augmented)
        x_in' = RK4_G(x_in, x_ex, h, t)  x_ex held over the step
        h'    = h
    """

    def __init__(self, plant: PlantModel, net: OdeNet, measurement: MeasurementMap, dt: float,
                 param_names: Sequence[str] = (), param_noise: Optional[float] = None):
        self.plant = plant
        self.odenet = net
        self.measurement = measurement
        self.dt = dt
        self.param_names: Tuple[str, ...] = tuple(param_names)
        self.param_noise = param_noise
        self.d_ex, self.d_in, self.d_h = plant.dim_ex, plant.dim_in, len(self.param_names)
        if net.state_dim != self.d_ex:
            raise ConfigurationError(f"ODE-Net state dim {net.state_dim} != dim(x_ex) {self.d_ex}")
        if net.augmented:
            self.u_idx = np.arange(self.d_in)
        else:
            self.u_idx = plant.u_in_indices
        if net.input_dim != len(self.u_idx):
            raise ConfigurationError(f"ODE-Net input dim {net.input_dim} != dim(u) {len(self.u_idx)}")
        self.layout = StateLayout(
            list(plant.ex_layout.names) + list(plant.in_layout.names) + [f"param.{p}" for p in self.param_names]
        )
        self.meas_names = measurement.names

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.d_ex, self.d_in, self.d_h

    @property
    def n(self) -> int:
        return self.d_ex + self.d_in + self.d_h

    def split(self, x: np.ndarray):
        return x[..., :self.d_ex], x[..., self.d_ex:self.d_ex + self.d_in], x[..., self.d_ex + self.d_in:]

    def compose(self, state: PartitionedState) -> np.ndarray:
        parts = [np.asarray(state.x_ex, float), np.asarray(state.x_in, float)]
        if self.d_h:
            if state.h_param is None:
                raise ConfigurationError("Augmented model needs h_param in the initial state")
            parts.append(np.atleast_1d(np.asarray(state.h_param, float)))
        return np.concatenate(parts)

    def _params(self, h: np.ndarray) -> Dict[str, np.ndarray]:
        return {name: h[:, i] for i, name in enumerate(self.param_names)}

    def _insys_step(self, x_in, x_ex, h, k: int) -> np.ndarray:
        params = self._params(h)
        f = lambda xi, t: self.plant.insys_rates(xi, x_ex, params, t)
        return rk4_step(f, x_in, k * self.dt, self.dt)

    def step(self, x: np.ndarray, k: int) -> np.ndarray:
        x = np.asarray(x, float)
        squeeze = x.ndim == 1
        xb = x[None, :] if squeeze else x
        x_ex, x_in, h = self.split(xb)
        out = np.empty_like(xb)
        out[:, :self.d_ex] = odenet_ops.step(self.odenet, x_ex, x_in[:, self.u_idx], self.dt)
        out[:, self.d_ex:self.d_ex + self.d_in] = self._insys_step(x_in, x_ex, h, k)
        out[:, self.d_ex + self.d_in:] = h
        return out[0] if squeeze else out

    def jacobian(self, x: np.ndarray, k: int) -> np.ndarray:
        """
        d(step)/dx: exact autograd rows for the ODE-Net block, central
        differences of the discrete G step for the InSys block
        """
        x = np.asarray(x, float)
        x_ex, x_in, h = self.split(x)
        J = np.zeros((self.n, self.n))
        J_x, J_u = odenet_ops.step_jacobians(self.odenet, x_ex, x_in[self.u_idx], self.dt)
        J[:self.d_ex, :self.d_ex] = J_x
        J[:self.d_ex, self.d_ex + self.u_idx] = J_u

        n = self.n
        eps = 1e-6 * np.maximum(1.0, np.abs(x))
        shifted = np.repeat(x[None, :], 2 * n, axis=0)
        shifted[np.arange(0, 2 * n, 2), np.arange(n)] += eps
        shifted[np.arange(1, 2 * n, 2), np.arange(n)] -= eps
        p_ex, p_in, p_h = self.split(shifted)
        nxt = self._insys_step(p_in, p_ex, p_h, k)
        J[self.d_ex:self.d_ex + self.d_in, :] = ((nxt[0::2] - nxt[1::2]) / (2.0 * eps[:, None])).T
        if self.d_h:
            J[self.d_ex + self.d_in:, self.d_ex + self.d_in:] = np.eye(self.d_h)
        return J

    def measure(self, x: np.ndarray, k: int) -> np.ndarray:
        x_ex, x_in, _ = self.split(np.asarray(x, float))
        return self.measurement(x_ex, x_in, k * self.dt)

    def measure_jacobian(self, x: np.ndarray, k: int) -> np.ndarray:
        x_ex, x_in, _ = self.split(np.asarray(x, float))
        J = self.measurement.jacobian(x_ex, x_in, k * self.dt)
        if self.d_h:
            J = np.hstack([J, np.zeros((J.shape[0], self.d_h))])
        return J


class LinearGaussianModel:
    """x' = F x, y = H x"""

    def __init__(self, F, H, names: Optional[Sequence[str]] = None):
        self.F = np.atleast_2d(np.asarray(F, float))
        self.H = np.atleast_2d(np.asarray(H, float))
        if self.F.shape[0] != self.F.shape[1] or self.H.shape[1] != self.F.shape[0]:
            raise ConfigurationError("F must be square and H must have as many columns as F")
        n = self.F.shape[0]
        self.layout = StateLayout(names or [f"x{i}" for i in range(n)])
        self.meas_names = tuple(f"y{i}" for i in range(self.H.shape[0]))
        self.dims = (0, n, 0)

    def step(self, x, k):
        return np.asarray(x, float) @ self.F.T

    def jacobian(self, x, k):
        return self.F.copy()

    def measure(self, x, k):
        return np.asarray(x, float) @ self.H.T

    def measure_jacobian(self, x, k):
        return self.H.copy()


def augment_with_parameter(model: HybridModel, param_names: Sequence[str], W_H: float) -> HybridModel:
    """
    Append physics parameters (e.g. "der2.H") as random-walk states

    Raises:
        ConfigurationError: parameter not present in the InSys physics
    """
    available = model.plant.param_names_available()
    for name in param_names:
        if name not in available:
            raise ConfigurationError(f"Unknown parameter '{name}'; available: {available}")
    if W_H < 0:
        raise ConfigurationError("W_H must be non-negative")
    return HybridModel(model.plant, model.odenet, model.measurement, model.dt,
                       param_names=tuple(model.param_names) + tuple(param_names), param_noise=W_H)


# --- EKF ---

def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _check_state(x: np.ndarray, k: int, last_good: Optional[np.ndarray]):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > STATE_LIMIT:
        raise FilterDivergenceError("State estimate diverged", step=k, last_good=last_good)


def ekf_predict(fs: FilterState, model: ProcessModel, noise: NoiseSpec):
    """
    x_pred = f(x_{k|k}), Sigma_pred = J Sigma J^T + W

    Returns:
        (x_pred, sigma_pred, J)
    """
    x_pred = model.step(fs.x, fs.k)
    _check_state(x_pred, fs.k + 1, fs.x)
    J = model.jacobian(fs.x, fs.k)
    sigma_pred = _symmetrize(J @ fs.sigma @ J.T + noise.W)
    return x_pred, sigma_pred, J


def kalman_gain(sigma_pred: np.ndarray, J_M: np.ndarray, R: np.ndarray,
                diagnostics: Optional[dict] = None) -> np.ndarray:
    """
    K = Sigma_pred J_M^T (J_M Sigma_pred J_M^T + R)^-1

    Falls back to a pseudo-inverse when the innovation covariance has a
    condition number above 1e12.
    """
    S = _symmetrize(J_M @ sigma_pred @ J_M.T + R)
    PHt = sigma_pred @ J_M.T
    if np.linalg.cond(S) > ILL_CONDITIONED:
        logger.warning("Ill-conditioned innovation covariance, using pseudo-inverse")
        if diagnostics is not None:
            diagnostics["pinv_fallback"] = True
        return PHt @ np.linalg.pinv(S)
    return la.solve(S, PHt.T, assume_a="pos").T


def ekf_correct(x_pred: np.ndarray, sigma_pred: np.ndarray, K: np.ndarray, y_tilde: np.ndarray,
                model: ProcessModel, k: int, R: Optional[np.ndarray] = None, joseph: bool = False) -> FilterState:
    """
    x_{k|k} = x_pred + K (y~ - M(x_pred)); Sigma_k = Sigma_pred (I - J_M^T K^T), symmetrized
    """
    y_tilde = np.asarray(y_tilde, float)
    innovation = y_tilde - model.measure(x_pred, k)
    if K.shape != (len(x_pred), len(y_tilde)):
        raise ConfigurationError(f"Gain shape {K.shape} does not match ({len(x_pred)}, {len(y_tilde)})")
    J_M = model.measure_jacobian(x_pred, k)
    x = x_pred + K @ innovation
    I = np.eye(len(x_pred))
    if joseph:
        if R is None:
            raise ConfigurationError("Joseph-form update needs R")
        A = I - K @ J_M
        sigma = A @ sigma_pred @ A.T + K @ R @ K.T
    else:
        sigma = sigma_pred @ (I - J_M.T @ K.T)
    return FilterState(x=x, sigma=_symmetrize(sigma), k=k, split=_split_of(model))


def _split_of(model) -> Tuple[int, int]:
    d_ex, d_in, _ = getattr(model, "dims", (0, len(model.layout), 0))
    return d_ex, d_in


# --- UKF ---

@dataclass(frozen=True)
class UkfParams:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0


def _cholesky(P: np.ndarray, k: int) -> np.ndarray:
    for jitter in CHOLESKY_JITTER:
        try:
            return la.cholesky(P + jitter * np.eye(len(P)), lower=True)
        except la.LinAlgError:
            continue
    raise FilterDivergenceError("Covariance is not positive definite (Cholesky failed)", step=k)


def _sigma_points(x: np.ndarray, P: np.ndarray, p: UkfParams, k: int):
    n = len(x)
    lam = p.alpha ** 2 * (n + p.kappa) - n
    L = _cholesky((n + lam) * P, k)
    chi = np.vstack([x, x + L.T, x - L.T])
    Wm = np.full(2 * n + 1, 0.5 / (n + lam))
    Wc = Wm.copy()
    Wm[0] = lam / (n + lam)
    Wc[0] = Wm[0] + (1.0 - p.alpha ** 2 + p.beta)
    return chi, Wm, Wc


def ukf_correct(x_pred: np.ndarray, sigma_pred: np.ndarray, model: ProcessModel, y_tilde: np.ndarray,
                k: int, R: np.ndarray, params: UkfParams = UkfParams()):
    """Unscented measurement update; returns (FilterState, K, innovation)"""
    chi, Wm, Wc = _sigma_points(x_pred, sigma_pred, params, k)
    Y = model.measure(chi, k)
    y_mean = Wm @ Y
    dY = Y - y_mean
    dX = chi - x_pred
    S = _symmetrize((Wc[:, None] * dY).T @ dY + R)
    Pxy = (Wc[:, None] * dX).T @ dY
    K = la.solve(S, Pxy.T, assume_a="pos").T
    innovation = np.asarray(y_tilde, float) - y_mean
    x = x_pred + K @ innovation
    sigma = _symmetrize(sigma_pred - K @ S @ K.T)
    return FilterState(x=x, sigma=sigma, k=k, split=_split_of(model)), K, innovation


def ukf_predict(fs: FilterState, model: ProcessModel, noise: NoiseSpec, params: UkfParams = UkfParams()):
    chi, Wm, Wc = _sigma_points(fs.x, fs.sigma, params, fs.k)
    chi_next = model.step(chi, fs.k)
    x_pred = Wm @ chi_next
    _check_state(x_pred, fs.k + 1, fs.x)
    d = chi_next - x_pred
    sigma_pred = _symmetrize((Wc[:, None] * d).T @ d + noise.W)
    return x_pred, sigma_pred


def ukf_step(fs: FilterState, model: ProcessModel, noise: NoiseSpec, y_tilde: np.ndarray,
             params: UkfParams = UkfParams()) -> FilterState:
    """Unscented transform through the one-step map, then a measurement update from fresh sigma points"""
    x_pred, sigma_pred = ukf_predict(fs, model, noise, params)
    state, _, _ = ukf_correct(x_pred, sigma_pred, model, y_tilde, fs.k + 1, noise.R, params)
    return state


# --- Runner ---

@dataclass
class FilterResult:
    """Estimated trajectory plus per-step diagnostics"""
    estimates: np.ndarray
    predictions: np.ndarray
    innovations: np.ndarray
    gain_norms: np.ndarray
    sigma_traces: np.ndarray
    pinv_fallbacks: np.ndarray
    final: FilterState
    state_names: Tuple[str, ...]
    meas_names: Tuple[str, ...]
    backend: str
    gain_source: str
    covariance_propagated: bool = True
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def diagnostics_frame(self):
        import pandas as pd
        frame = pd.DataFrame({
            "k": np.arange(len(self.estimates)),
            "gain_norm": self.gain_norms,
            "sigma_trace": self.sigma_traces,
            "pinv_fallback": self.pinv_fallbacks.astype(int),
        })
        for j, name in enumerate(self.meas_names):
            frame[f"innovation.{name}"] = self.innovations[:, j]
        return frame


def _initial_sigma(sigma0: Union[float, np.ndarray], n: int) -> np.ndarray:
    if np.isscalar(sigma0):
        return float(sigma0) * np.eye(n)
    sigma0 = np.asarray(sigma0, float)
    if sigma0.shape != (n, n):
        raise ConfigurationError(f"sigma0 must be {n}x{n}")
    return sigma0


def run_filter(model: ProcessModel, noise: NoiseSpec, y_sequence: np.ndarray, x0_guess: np.ndarray,
               sigma0: Union[float, np.ndarray] = 1e-4, backend: str = "ekf", gain_source: str = "analytic",
               learned_gain=None, joseph: bool = False, ukf_params: UkfParams = UkfParams()) -> FilterResult:
    """
    Sequential estimation over all samples of ``y_sequence``

    Sample 0 is a correction of ``x0_guess``; every later sample is a
    predict/correct pair. With ``gain_source="learned"`` the gain comes from
    ``learned_gain`` (reset()/gain(...) interface) and Sigma is not propagated.

    Raises:
        FilterDivergenceError: non-finite estimate or |x| > 1e6 (step index and last good state)
    """
    y_sequence = np.atleast_2d(np.asarray(y_sequence, float))
    if len(y_sequence) == 0:
        raise ConfigurationError("y_sequence is empty")
    if y_sequence.shape[1] != len(model.meas_names):
        raise ConfigurationError(
            f"Measurements have {y_sequence.shape[1]} channels, model expects {len(model.meas_names)}"
        )
    if backend not in ("ekf", "ukf"):
        raise ConfigurationError(f"Unknown backend '{backend}'")
    if gain_source not in ("analytic", "learned"):
        raise ConfigurationError(f"Unknown gain source '{gain_source}'")
    if gain_source == "learned" and learned_gain is None:
        raise ConfigurationError("Learned gain requested but no gain network supplied")

    x0 = np.asarray(x0_guess, float)
    n, m, steps = len(x0), y_sequence.shape[1], len(y_sequence)
    if n != len(model.layout):
        raise ConfigurationError(f"x0_guess has {n} entries, layout has {len(model.layout)}")
    estimates = np.zeros((steps, n))
    predictions = np.zeros((steps, n))
    innovations = np.zeros((steps, m))
    gain_norms = np.zeros(steps)
    traces = np.zeros(steps)
    fallbacks = np.zeros(steps, dtype=bool)

    sigma = _initial_sigma(sigma0, n)
    fs = FilterState(x=x0, sigma=sigma, k=0, split=_split_of(model))
    if learned_gain is not None:
        learned_gain.reset()

    for k in range(steps):
        diag: dict = {}
        try:
            if k == 0:
                x_pred, sigma_pred = x0, sigma
            elif gain_source == "learned":
                x_pred = model.step(fs.x, fs.k)
                _check_state(x_pred, k, fs.x)
                sigma_pred = fs.sigma
            elif backend == "ekf":
                x_pred, sigma_pred, _ = ekf_predict(fs, model, noise)
            else:
                x_pred, sigma_pred = ukf_predict(fs, model, noise, ukf_params)

            y = y_sequence[k]
            if gain_source == "learned":
                y_pred = model.measure(x_pred, k)
                K = learned_gain.gain(k, y, y_pred, x_pred, fs.x)
                innovation = y - y_pred
                fs = FilterState(x=x_pred + K @ innovation, sigma=sigma_pred, k=k, split=_split_of(model))
            elif backend == "ekf":
                J_M = model.measure_jacobian(x_pred, k)
                K = kalman_gain(sigma_pred, J_M, noise.R, diag)
                innovation = y - model.measure(x_pred, k)
                fs = ekf_correct(x_pred, sigma_pred, K, y, model, k, noise.R, joseph)
            else:
                fs, K, innovation = ukf_correct(x_pred, sigma_pred, model, y, k, noise.R, ukf_params)
        except (la.LinAlgError, FloatingPointError) as e:
            raise FilterDivergenceError(f"Linear algebra failure: {e}", step=k,
                                        last_good=estimates[k - 1] if k else x0) from e
        _check_state(fs.x, k, estimates[k - 1] if k else x0)

        estimates[k] = fs.x
        predictions[k] = x_pred
        innovations[k] = innovation
        gain_norms[k] = np.linalg.norm(K)
        traces[k] = np.trace(fs.sigma)
        fallbacks[k] = diag.get("pinv_fallback", False)
        if not np.isfinite(traces[k]):
            raise FilterDivergenceError("Covariance trace is not finite", step=k, last_good=fs.x)

    if gain_source == "learned":
        logger.debug("Learned gain in use: covariance is not propagated")
    return FilterResult(
        estimates=estimates,
        predictions=predictions,
        innovations=innovations,
        gain_norms=gain_norms,
        sigma_traces=traces,
        pinv_fallbacks=fallbacks,
        final=fs,
        state_names=tuple(model.layout.names),
        meas_names=tuple(model.meas_names),
        backend=backend,
        gain_source=gain_source,
        covariance_propagated=gain_source == "analytic",
    )


def open_loop_rollout(model: ProcessModel, x0: np.ndarray, n_samples: int) -> np.ndarray:
    """Uncorrected propagation of the process model (baseline)"""
    out = np.zeros((n_samples, len(x0)))
    out[0] = x0
    for k in range(1, n_samples):
        out[k] = model.step(out[k - 1], k - 1)
        if not np.all(np.isfinite(out[k])) or np.max(np.abs(out[k])) > STATE_LIMIT:
            out[k:] = np.nan
            logger.warning("Open-loop rollout diverged at step %d", k)
            break
    return out


def kalman_filter_lti(F, H, W, R, y_sequence, x0, P0) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Textbook Kalman filter (same sample-0 convention as run_filter)"""
    F, H, W, R = (np.atleast_2d(np.asarray(a, float)) for a in (F, H, W, R))
    x = np.asarray(x0, float)
    P = np.atleast_2d(np.asarray(P0, float))
    xs, Ps = [], []
    for k, y in enumerate(np.atleast_2d(np.asarray(y_sequence, float))):
        if k > 0:
            x = F @ x
            P = F @ P @ F.T + W
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x = x + K @ (y - H @ x)
        P = (np.eye(len(x)) - K @ H) @ P
        P = 0.5 * (P + P.T)
        xs.append(x.copy())
        Ps.append(P.copy())
    return np.array(xs), Ps
