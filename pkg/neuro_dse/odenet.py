"""
ODE-Net for the ExSys boundary dynamics
=======================================

dx_ex/dt = F(x_ex, u; theta), a tanh perceptron trained through its own
fixed-step RK4 integration.

Features:
- Plain wiring u = u_in (designated InSys boundary states) or augmented
  wiring u = x_in (filtered InSys states)
- Batched windowed rollouts, sum-of-squares loss with L2 regularization
- Gradients by reverse-mode differentiation through the RK4 steps, so they
  are exact for the discrete map the filter uses
- Input Jacobians of F and of one RK4 step for the filter
- JSON checkpoints and CSV loss histories
"""
import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from torch.nn.utils import parameters_to_vector, skip_init, vector_to_parameters

from neuro_dse.errors import ConfigurationError, RolloutDivergenceError, TrainingDivergenceError
from neuro_dse.models import TrainConfig
from utils.helpers import dump_json

logger = logging.getLogger(__name__)

DTYPE = torch.float64
DIVERGENCE_WINDOW = 50
DIVERGENCE_FACTOR = 10.0


class OdeNet(nn.Module):
    """
    Two-hidden-layer tanh perceptron F(x_ex, u)

    Inputs and outputs pass through fixed affine scalings (buffers, not part
    of theta); they default to identity.
    """

    def __init__(self, state_dim: int, input_dim: int, hidden_dims: Sequence[int] = (40, 40),
                 augmented: bool = False, seed: int = 0):
        super().__init__()
        if state_dim < 1 or input_dim < 0:
            raise ConfigurationError("OdeNet needs state_dim >= 1 and input_dim >= 0")
        self.state_dim = state_dim
        self.input_dim = input_dim
        self.hidden_dims = list(hidden_dims)
        self.augmented = augmented

        dims = [state_dim + input_dim] + self.hidden_dims + [state_dim]
        layers: List[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(skip_init(nn.Linear, dims[i], dims[i + 1], dtype=DTYPE))
            if i < len(dims) - 2:
                layers.append(nn.Tanh())
        self.net = nn.Sequential(*layers).to(DTYPE)

        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in self.net:
                if isinstance(layer, nn.Linear):
                    bound = 1.0 / math.sqrt(layer.in_features)
                    layer.weight.uniform_(-bound, bound, generator=generator)
                    layer.bias.uniform_(-bound, bound, generator=generator)

        self.register_buffer("x_offset", torch.zeros(state_dim, dtype=DTYPE))
        self.register_buffer("x_scale", torch.ones(state_dim, dtype=DTYPE))
        self.register_buffer("u_offset", torch.zeros(input_dim, dtype=DTYPE))
        self.register_buffer("u_scale", torch.ones(input_dim, dtype=DTYPE))
        self.register_buffer("rate_scale", torch.ones(state_dim, dtype=DTYPE))

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def theta(self) -> np.ndarray:
        return parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_theta(self, theta) -> None:
        theta = torch.as_tensor(np.asarray(theta, float), dtype=DTYPE)
        if theta.numel() != self.n_params:
            raise ConfigurationError(f"theta has {theta.numel()} entries, expected {self.n_params}")
        vector_to_parameters(theta, self.parameters())

    def calibrate(self, x_ex: np.ndarray, u: np.ndarray, dt: float) -> None:
        """Set input/output scalings from sampled data (rows are samples)"""
        x_ex = np.asarray(x_ex, float)
        u = np.asarray(u, float).reshape(len(x_ex), -1)
        rates = np.diff(x_ex, axis=0) / dt
        with torch.no_grad():
            self.x_offset.copy_(torch.as_tensor(x_ex.mean(axis=0)))
            self.x_scale.copy_(torch.as_tensor(np.maximum(x_ex.std(axis=0), 1e-3)))
            if self.input_dim:
                self.u_offset.copy_(torch.as_tensor(u.mean(axis=0)))
                self.u_scale.copy_(torch.as_tensor(np.maximum(u.std(axis=0), 1e-3)))
            self.rate_scale.copy_(torch.as_tensor(np.maximum(np.sqrt(np.mean(rates ** 2, axis=0)), 1e-3)))

    def forward(self, x_ex: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        if x_ex.shape[-1] != self.state_dim or u.shape[-1] != self.input_dim:
            raise ConfigurationError(
                f"OdeNet expects x_ex[{self.state_dim}] and u[{self.input_dim}], "
                f"got {tuple(x_ex.shape)} and {tuple(u.shape)}"
            )
        z = torch.cat([(x_ex - self.x_offset) / self.x_scale, (u - self.u_offset) / self.u_scale], dim=-1)
        return self.rate_scale * self.net(z)

    def rk4(self, x: torch.Tensor, u: torch.Tensor, dt: float) -> torch.Tensor:
        """One RK4 step with u held constant"""
        k1 = self(x, u)
        k2 = self(x + 0.5 * dt * k1, u)
        k3 = self(x + 0.5 * dt * k2, u)
        k4 = self(x + dt * k3, u)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, float), dtype=DTYPE)


def forward(model: OdeNet, x_ex, u) -> np.ndarray:
    """F(x_ex, u; theta) on numpy inputs (batch axis optional)"""
    with torch.no_grad():
        return model(_tensor(x_ex), _tensor(u)).numpy()


def _rollout_tensor(model: OdeNet, x0: torch.Tensor, u_seq: torch.Tensor, dt: float) -> torch.Tensor:
    """x0: (B, d); u_seq: (n, B, m) -> states (n+1, B, d)"""
    states = [x0]
    x = x0
    for k in range(u_seq.shape[0]):
        x = model.rk4(x, u_seq[k], dt)
        states.append(x)
    out = torch.stack(states)
    finite = torch.isfinite(out).reshape(out.shape[0], -1).all(dim=1)
    if not bool(finite.all()):
        bad = int(torch.nonzero(~finite)[0, 0])
        raise RolloutDivergenceError("ODE-Net rollout produced a non-finite state", step=bad)
    return out


def rollout(model: OdeNet, x0, u_sequence, dt: float, n_steps: Optional[int] = None) -> np.ndarray:
    """
    Integrate dx/dt = F(x, u) with RK4 from x0

    Args:
        x0: initial state (d,)
        u_sequence: inputs, one row per step (zero-order hold within the step)
        dt: step size
        n_steps: defaults to len(u_sequence)

    Returns:
        (n_steps+1, d) array, row 0 is x0

    Raises:
        RolloutDivergenceError: non-finite state
    """
    u_sequence = np.asarray(u_sequence, float).reshape(-1, model.input_dim)
    n_steps = len(u_sequence) if n_steps is None else n_steps
    if n_steps > len(u_sequence):
        raise ConfigurationError("u_sequence shorter than n_steps")
    with torch.no_grad():
        x0_t = _tensor(x0).reshape(1, model.state_dim)
        u_t = _tensor(u_sequence[:n_steps]).reshape(n_steps, 1, model.input_dim)
        return _rollout_tensor(model, x0_t, u_t, dt)[:, 0, :].numpy()


def step(model: OdeNet, x_ex, u, dt: float) -> np.ndarray:
    """One RK4 step on a batch"""
    with torch.no_grad():
        return model.rk4(_tensor(x_ex), _tensor(u), dt).numpy()


def input_jacobians(model: OdeNet, x_ex, u) -> Tuple[np.ndarray, np.ndarray]:
    """Exact (dF/dx_ex, dF/du) at one point"""
    x_t, u_t = _tensor(x_ex), _tensor(u)
    if x_t.shape != (model.state_dim,) or u_t.shape != (model.input_dim,):
        raise ConfigurationError("input_jacobians expects unbatched x_ex and u")
    J_x, J_u = torch.autograd.functional.jacobian(lambda a, b: model(a, b), (x_t, u_t))
    return J_x.detach().numpy(), J_u.detach().numpy()


def step_jacobians(model: OdeNet, x_ex, u, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Exact Jacobians of one RK4 step with respect to x_ex and u"""
    x_t, u_t = _tensor(x_ex), _tensor(u)
    J_x, J_u = torch.autograd.functional.jacobian(lambda a, b: model.rk4(a, b, dt), (x_t, u_t))
    return J_x.detach().numpy(), J_u.detach().numpy()


# --- Objectives ---

@dataclass
class Window:
    x0: torch.Tensor       # (B, d)
    u: torch.Tensor        # (n, B, m)
    targets: torch.Tensor  # (n, B, d)


def _windows(starts_seq: Sequence[np.ndarray], u_seq: Sequence[np.ndarray], target_seq: Sequence[np.ndarray],
             batch_len: Optional[int]) -> List[Window]:
    """Group equal-length sub-trajectories into batched windows"""
    groups = {}
    for x_init, u, target in zip(starts_seq, u_seq, target_seq):
        n = len(target)
        length = n if batch_len is None else min(batch_len, n)
        start = 0
        while start < n - 1:
            stop = min(start + length, n)
            if stop - start < 2:
                break
            groups.setdefault(stop - start, []).append((x_init[start], u[start:stop - 1], target[start + 1:stop]))
            start = stop - 1
    out = []
    for length in sorted(groups):
        items = groups[length]
        out.append(Window(
            x0=_tensor(np.stack([i[0] for i in items])),
            u=_tensor(np.stack([i[1] for i in items], axis=1)),
            targets=_tensor(np.stack([i[2] for i in items], axis=1)),
        ))
    return out


class PlainObjective:
    """Rollout from measured x_ex driven by u_in; targets are the measured x_ex"""

    def __init__(self, x_ex: Sequence[np.ndarray], u: Sequence[np.ndarray], dt: float,
                 batch_len: Optional[int] = None):
        x_ex = [np.asarray(x, float) for x in x_ex]
        u = [np.asarray(v, float).reshape(len(v), -1) for v in u]
        if not x_ex or any(len(x) < 2 for x in x_ex):
            raise ConfigurationError("Training data must contain trajectories with at least two samples")
        if len(x_ex) != len(u) or any(len(a) != len(b) for a, b in zip(x_ex, u)):
            raise ConfigurationError("x_ex and u sequences must have matching lengths")
        self.x_ex, self.u, self.dt, self.batch_len = x_ex, u, dt, batch_len
        self.windows = _windows(x_ex, u, x_ex, batch_len)

    def calibration_data(self):
        return np.vstack(self.x_ex), np.vstack(self.u)


class RefinedObjective:
    """Rollout from measured x_ex driven by filtered x_in; targets are filtered x_ex"""

    def __init__(self, measured_x_ex: Sequence[np.ndarray], estimated_x_in: Sequence[np.ndarray],
                 estimated_x_ex: Sequence[np.ndarray], dt: float, batch_len: Optional[int] = None):
        measured = [np.asarray(x, float) for x in measured_x_ex]
        est_in = [np.asarray(x, float) for x in estimated_x_in]
        est_ex = [np.asarray(x, float) for x in estimated_x_ex]
        if not (len(measured) == len(est_in) == len(est_ex)):
            raise ConfigurationError("Refined objective needs one estimate per measured trajectory")
        for a, b, c in zip(measured, est_in, est_ex):
            if not (len(a) == len(b) == len(c)):
                raise ConfigurationError("Measured and estimated sequences differ in length")
        self.measured, self.est_in, self.est_ex = measured, est_in, est_ex
        self.dt, self.batch_len = dt, batch_len
        self.windows = _windows(measured, est_in, est_ex, batch_len)

    def calibration_data(self):
        return np.vstack(self.est_ex), np.vstack(self.est_in)


Objective = Union[PlainObjective, RefinedObjective]


def _objective_tensor(model: OdeNet, objective: Objective, gamma: float) -> torch.Tensor:
    loss = torch.zeros((), dtype=DTYPE)
    for w in objective.windows:
        pred = _rollout_tensor(model, w.x0, w.u, objective.dt)[1:]
        loss = loss + torch.sum((pred - w.targets) ** 2)
    if gamma:
        loss = loss + gamma * torch.sum(parameters_to_vector(model.parameters()) ** 2)
    return loss


def _loss_and_grad(model: OdeNet, objective: Objective, gamma: float) -> Tuple[float, np.ndarray]:
    model.zero_grad()
    loss = _objective_tensor(model, objective, gamma)
    grads = torch.autograd.grad(loss, list(model.parameters()))
    return float(loss.detach()), torch.cat([g.reshape(-1) for g in grads]).numpy()


def loss_plain(model: OdeNet, x_ex: Sequence[np.ndarray], u: Sequence[np.ndarray], dt: float,
               gamma: float = 0.0, batch_len: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """
    L = sum_k |x_k - x~_k|^2 + gamma |theta|^2 with its exact gradient

    Raises:
        RolloutDivergenceError: a rollout left the finite range
    """
    return _loss_and_grad(model, PlainObjective(x_ex, u, dt, batch_len), gamma)


def loss_refined(model: OdeNet, measured_x_ex: Sequence[np.ndarray], estimated_x_in: Sequence[np.ndarray],
                 estimated_x_ex: Sequence[np.ndarray], dt: float, gamma: float = 0.0,
                 batch_len: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """Self-refined loss: rollout driven by filtered InSys states, scored against filtered x_ex"""
    return _loss_and_grad(model, RefinedObjective(measured_x_ex, estimated_x_in, estimated_x_ex, dt, batch_len),
                          gamma)


# --- Training ---

def make_optimizer(name: str, params, eta: float) -> torch.optim.Optimizer:
    if name == "sgd":
        return torch.optim.SGD(params, lr=eta)
    if name == "momentum":
        return torch.optim.SGD(params, lr=eta, momentum=0.9)
    if name == "adam":
        return torch.optim.Adam(params, lr=eta)
    raise ConfigurationError(f"Unknown optimizer '{name}'")


def train(model: OdeNet, objective: Objective, cfg: TrainConfig, phase: Optional[str] = None,
          calibrate: bool = False) -> Tuple[OdeNet, List[float]]:
    """
    Full-batch gradient training

    Stops after cfg.epochs or once |dL|/L < cfg.rel_tol for cfg.patience
    consecutive epochs. The returned model carries the best-loss theta.

    Raises:
        TrainingDivergenceError: loss grew 10x over 50 epochs or became non-finite
    """
    if cfg.epochs == 0:
        return model, []
    if calibrate:
        x_cal, u_cal = objective.calibration_data()
        model.calibrate(x_cal, u_cal, objective.dt)

    optimizer = make_optimizer(cfg.optimizer, model.parameters(), cfg.eta)
    history: List[float] = []
    best_loss, best_theta = math.inf, parameters_to_vector(model.parameters()).detach().clone()
    stall = 0

    for epoch in range(cfg.epochs):
        optimizer.zero_grad()
        try:
            loss = _objective_tensor(model, objective, cfg.gamma)
        except RolloutDivergenceError as e:
            raise TrainingDivergenceError(
                f"rollout diverged during training ({e}); try a smaller eta", epoch=epoch, phase=phase
            ) from e
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergenceError("loss is not finite; try a smaller eta", epoch=epoch, phase=phase)
        history.append(value)
        if value < best_loss:
            best_loss = value
            best_theta = parameters_to_vector(model.parameters()).detach().clone()

        if epoch >= DIVERGENCE_WINDOW and value > DIVERGENCE_FACTOR * history[epoch - DIVERGENCE_WINDOW]:
            raise TrainingDivergenceError(
                f"loss grew from {history[epoch - DIVERGENCE_WINDOW]:.3e} to {value:.3e}; try a smaller eta",
                epoch=epoch, phase=phase,
            )
        if epoch > 0 and history[-2] > 0 and abs(history[-2] - value) / history[-2] < cfg.rel_tol:
            stall += 1
            if stall >= cfg.patience:
                logger.info("ODE-Net converged at epoch %d, loss %.4e", epoch, value)
                break
        else:
            stall = 0
        if epoch % cfg.log_every == 0:
            logger.info("ODE-Net epoch %d loss %.6e", epoch, value)

        loss.backward()
        optimizer.step()

    vector_to_parameters(best_theta, model.parameters())
    return model, history


def clone(model: OdeNet) -> OdeNet:
    return copy.deepcopy(model)


# --- Persistence ---

def checkpoint_payload(model: OdeNet, cfg_hash: Optional[str] = None) -> dict:
    return {
        "kind": "odenet",
        "input_dim": model.input_dim,
        "state_dim": model.state_dim,
        "hidden_dims": model.hidden_dims,
        "output_dim": model.state_dim,
        "activation": "tanh",
        "augmented": model.augmented,
        "theta": [float(v) for v in model.theta],
        "scaling": {name: buf.tolist() for name, buf in model.named_buffers()},
        "config_hash": cfg_hash,
    }


def save_checkpoint(model: OdeNet, path, cfg_hash: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(checkpoint_payload(model, cfg_hash)), encoding="utf-8")
    return path


def load_checkpoint(path) -> OdeNet:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read checkpoint {path}: {e}") from e
    if payload.get("kind") != "odenet" or payload.get("activation") != "tanh":
        raise ConfigurationError(f"{path} is not an ODE-Net checkpoint")
    model = OdeNet(payload["state_dim"], payload["input_dim"], payload["hidden_dims"], payload["augmented"])
    model.set_theta(payload["theta"])
    with torch.no_grad():
        for name, values in payload.get("scaling", {}).items():
            getattr(model, name).copy_(torch.as_tensor(values, dtype=DTYPE))
    return model


def write_loss_history(history: Sequence[float], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"epoch": np.arange(len(history)), "loss": np.asarray(history, float)}).to_csv(
        path, index=False, float_format="%.17g"
    )
    return path
