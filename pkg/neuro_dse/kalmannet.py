"""
Learned Kalman gain (KalmanNet)
===============================

A recurrent network maps innovation-derived features to the gain matrix
used in x_{k|k} = x_pred + K_k (y_k - M(x_pred)).

Features per step:
- delta_y:       y_k - y_{k-1}
- delta_y_tilde: y_k - M(x_{k|k-1})
- delta_x:       x_{k-1|k-1} - x_{k-1|k-2}

Training backpropagates through the whole filter recursion (truncated
windows); the process and measurement maps enter the graph as custom
autograd functions whose backward pass is a vector-Jacobian product.
"""
import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils import parameters_to_vector, skip_init, vector_to_parameters

from neuro_dse.errors import ConfigurationError, TrainingDivergenceError
from neuro_dse.models import GainNetConfig
from neuro_dse.odenet import DIVERGENCE_FACTOR, DIVERGENCE_WINDOW, make_optimizer
from utils.helpers import dump_json

logger = logging.getLogger(__name__)

DTYPE = torch.float64


class GainNet(nn.Module):
    """Linear -> GRUCell -> Linear, output reshaped to an n_x x n_y gain"""

    def __init__(self, n_x: int, n_y: int, hidden_dim: int = 64, seed: int = 0):
        super().__init__()
        self.n_x, self.n_y, self.hidden_dim = n_x, n_y, hidden_dim
        self.feature_dim = 2 * n_y + n_x
        self.input_layer = skip_init(nn.Linear, self.feature_dim, hidden_dim, dtype=DTYPE)
        self.gru = skip_init(nn.GRUCell, hidden_dim, hidden_dim, dtype=DTYPE)
        self.output_layer = skip_init(nn.Linear, hidden_dim, n_x * n_y, dtype=DTYPE)

        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer, fan_in in ((self.input_layer, self.feature_dim), (self.gru, hidden_dim),
                                  (self.output_layer, hidden_dim)):
                bound = 1.0 / math.sqrt(fan_in)
                for p in layer.parameters():
                    p.uniform_(-bound, bound, generator=generator)
            # near-zero initial gain
            self.output_layer.weight.mul_(1e-2)
            self.output_layer.bias.zero_()
        self.register_buffer("feature_scale", torch.ones(self.feature_dim, dtype=DTYPE))

    def init_hidden(self) -> torch.Tensor:
        return torch.zeros(self.hidden_dim, dtype=DTYPE)

    def forward(self, features: torch.Tensor, hidden: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if features.shape[-1] != self.feature_dim:
            raise ConfigurationError(f"GainNet expects {self.feature_dim} features, got {features.shape[-1]}")
        z = self.input_layer(features / self.feature_scale)
        hidden = self.gru(z.unsqueeze(0), hidden.unsqueeze(0)).squeeze(0)
        K = self.output_layer(hidden).reshape(self.n_x, self.n_y)
        return K, hidden

    @property
    def phi(self) -> np.ndarray:
        return parameters_to_vector(self.parameters()).detach().numpy().copy()


@dataclass
class GainFeatures:
    delta_y: np.ndarray
    delta_y_tilde: np.ndarray
    delta_x: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.delta_y, self.delta_y_tilde, self.delta_x])


def feature_extract(y_k, y_prev, y_tilde_k, x_pred, x_hat_prev, x_pred_prev, measurement_fn) -> GainFeatures:
    """
    Build the three feature differences; a missing previous step (k = 0)
    yields all-zero features.

    ``y_k``/``y_prev`` are consecutive observations, ``y_tilde_k`` the
    measurement the correction uses and ``measurement_fn(x_pred)`` its prediction.
    """
    y_k = np.asarray(y_k, float)
    x_pred = np.asarray(x_pred, float)
    if y_prev is None or x_hat_prev is None or x_pred_prev is None:
        return GainFeatures(np.zeros_like(y_k), np.zeros_like(y_k), np.zeros_like(x_pred))
    return GainFeatures(
        delta_y=y_k - np.asarray(y_prev, float),
        delta_y_tilde=np.asarray(y_tilde_k, float) - measurement_fn(x_pred),
        delta_x=np.asarray(x_hat_prev, float) - np.asarray(x_pred_prev, float),
    )


def gain_forward(net: GainNet, feats: GainFeatures, hidden: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Raises:
        ConfigurationError: non-finite features
    """
    vec = feats.as_vector()
    if not np.all(np.isfinite(vec)):
        raise ConfigurationError("GainNet features must be finite")
    with torch.no_grad():
        K, h = net(torch.as_tensor(vec, dtype=DTYPE), torch.as_tensor(np.asarray(hidden, float), dtype=DTYPE))
    return K.numpy(), h.numpy()


def correction_loss_grad(K, delta_y_tilde, x_pred, x_true, n: int) -> np.ndarray:
    """d/dK of (1/n)|x_pred + K dy~ - x~|^2"""
    K = np.asarray(K, float)
    dy = np.asarray(delta_y_tilde, float)
    residual = np.asarray(x_pred, float) + K @ dy - np.asarray(x_true, float)
    return (2.0 / n) * np.outer(residual, dy)


class LearnedGain:
    """Stateful gain provider for filters.run_filter(gain_source="learned")"""

    def __init__(self, net: GainNet, model):
        self.net = net
        self.model = model
        self.reset()

    def reset(self):
        self.hidden = np.zeros(self.net.hidden_dim)
        self.y_prev = None
        self.x_pred_prev = None

    def gain(self, k: int, y: np.ndarray, y_pred: np.ndarray, x_pred: np.ndarray,
             x_post_prev: np.ndarray) -> np.ndarray:
        feats = feature_extract(
            y, self.y_prev, y, x_pred, x_post_prev if k > 0 else None, self.x_pred_prev,
            lambda _x: y_pred,
        )
        K, self.hidden = gain_forward(self.net, feats, self.hidden)
        self.y_prev, self.x_pred_prev = np.array(y, float), np.array(x_pred, float)
        return K


# --- Differentiable filter recursion ---

class _ProcessStep(torch.autograd.Function):
    """x -> model.step(x, k) with backward g -> g J"""

    @staticmethod
    def forward(ctx, x, model, k):
        x_np = x.detach().numpy()
        ctx.jacobian = torch.as_tensor(model.jacobian(x_np, k), dtype=DTYPE)
        return torch.as_tensor(model.step(x_np, k), dtype=DTYPE)

    @staticmethod
    def backward(ctx, grad_out):
        return grad_out @ ctx.jacobian, None, None


class _Measure(torch.autograd.Function):
    """x -> model.measure(x, k) with backward g -> g J_M"""

    @staticmethod
    def forward(ctx, x, model, k):
        x_np = x.detach().numpy()
        ctx.jacobian = torch.as_tensor(model.measure_jacobian(x_np, k), dtype=DTYPE)
        return torch.as_tensor(model.measure(x_np, k), dtype=DTYPE)

    @staticmethod
    def backward(ctx, grad_out):
        return grad_out @ ctx.jacobian, None, None


@dataclass
class GainTrainingSet:
    """Ground-truth states (filter layout), measurements and the filter's initial guess per trajectory"""
    states: List[np.ndarray]
    measurements: List[np.ndarray]
    x0_guesses: List[np.ndarray]

    def __post_init__(self):
        if not self.states or not (len(self.states) == len(self.measurements) == len(self.x0_guesses)):
            raise ConfigurationError("GainNet training needs matching, non-empty states/measurements/x0 lists")
        for x, y in zip(self.states, self.measurements):
            if len(x) != len(y):
                raise ConfigurationError("Each training trajectory needs one measurement per state sample")


def _recursion(net: GainNet, model, y: torch.Tensor, x_true: torch.Tensor, x0: torch.Tensor,
               window: Optional[int], on_window=None) -> float:
    """
    Run the learned-gain filter over one trajectory

    ``on_window(loss, share)`` is called on each truncated window's loss tensor,
    ``share`` being the window's fraction of the trajectory samples; state
    carried across windows is detached.
    """
    n = len(y)
    hidden = net.init_hidden()
    x_post = x0
    y_prev = x_pred_prev = None
    x_post_prev = None
    total = 0.0
    loss = torch.zeros((), dtype=DTYPE)
    steps_in_window = 0
    for k in range(n):
        x_pred = x0 if k == 0 else _ProcessStep.apply(x_post, model, k - 1)
        y_pred = _Measure.apply(x_pred, model, k)
        if k == 0:
            feats = torch.zeros(net.feature_dim, dtype=DTYPE)
        else:
            feats = torch.cat([y[k] - y_prev, y[k] - y_pred, x_post_prev - x_pred_prev])
        K, hidden = net(feats, hidden)
        x_post = x_pred + K @ (y[k] - y_pred)
        loss = loss + torch.sum((x_post - x_true[k]) ** 2) / n
        y_prev, x_pred_prev, x_post_prev = y[k], x_pred, x_post
        steps_in_window += 1
        if window is not None and (steps_in_window == window or k == n - 1):
            total += float(loss.detach())
            if on_window is not None:
                on_window(loss, steps_in_window / n)
            loss = torch.zeros((), dtype=DTYPE)
            steps_in_window = 0
            hidden = hidden.detach()
            x_post, x_pred_prev, x_post_prev = x_post.detach(), x_pred_prev.detach(), x_post_prev.detach()
    if window is None:
        total += float(loss.detach())
        if on_window is not None:
            on_window(loss, 1.0)
    return total


def _as_tensors(data: GainTrainingSet, i: int):
    return (torch.as_tensor(np.asarray(data.measurements[i], float), dtype=DTYPE),
            torch.as_tensor(np.asarray(data.states[i], float), dtype=DTYPE),
            torch.as_tensor(np.asarray(data.x0_guesses[i], float), dtype=DTYPE))


def calibrate_normalizer(net: GainNet, model, data: GainTrainingSet,
                         delta_x_reference: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """
    Per-feature RMS over a no-gain pass of the training data, frozen into the network

    A no-gain pass has delta_x = 0; ``delta_x_reference`` (posterior minus
    prior rows from an analytic filter run) supplies that block's scale.
    """
    sq = np.zeros(net.feature_dim)
    count = 0
    for i in range(len(data.states)):
        y = np.asarray(data.measurements[i], float)
        x_pred_prev = x_post_prev = None
        x = np.asarray(data.x0_guesses[i], float)
        for k in range(len(y)):
            x_pred = x if k == 0 else model.step(x, k - 1)
            feats = feature_extract(y[k], y[k - 1] if k else None, y[k], x_pred, x_post_prev, x_pred_prev,
                                    lambda z: model.measure(z, k))
            sq += feats.as_vector() ** 2
            count += 1
            x_pred_prev, x_post_prev, x = x_pred, x_pred, x_pred
            if not np.all(np.isfinite(x)):
                raise ConfigurationError("Open-loop pass diverged while calibrating the feature normalizer")
    scale = np.sqrt(sq / max(count, 1))
    if delta_x_reference is not None and len(delta_x_reference):
        ref = np.vstack([np.asarray(r, float) for r in delta_x_reference])
        scale[2 * net.n_y:] = np.sqrt(np.mean(ref ** 2, axis=0))
    scale = np.where(scale > 1e-12, scale, 1.0)
    with torch.no_grad():
        net.feature_scale.copy_(torch.as_tensor(scale, dtype=DTYPE))
    return scale


def train_gainnet(net: GainNet, data: GainTrainingSet, model, cfg: GainNetConfig,
                  phase: Optional[str] = None, calibrate: bool = True,
                  delta_x_reference: Optional[Sequence[np.ndarray]] = None) -> Tuple[GainNet, List[float]]:
    """
    Minimize (1/n) sum_k |x_{k|k} - x~_k|^2 + gamma |phi|^2 through the filter recursion

    Raises:
        TrainingDivergenceError: non-finite loss or 10x growth over 50 epochs
    """
    if net.n_x != len(model.layout) or net.n_y != len(model.meas_names):
        raise ConfigurationError("GainNet dimensions do not match the process model")
    if cfg.epochs == 0:
        return net, []
    if calibrate:
        calibrate_normalizer(net, model, data, delta_x_reference)
    optimizer = make_optimizer(cfg.optimizer, net.parameters(), cfg.eta)
    history: List[float] = []
    best_loss, best_state = math.inf, copy.deepcopy(net.state_dict())

    n_trajectories = len(data.states)

    # one epoch of window steps carries gamma |phi|^2 exactly once, as in the logged loss
    def on_window(loss: torch.Tensor, share: float):
        if cfg.gamma:
            penalty = torch.sum(parameters_to_vector(net.parameters()) ** 2)
            loss = loss + cfg.gamma * share / n_trajectories * penalty
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.clip_norm)
        optimizer.step()

    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for i in range(len(data.states)):
            y, x_true, x0 = _as_tensors(data, i)
            epoch_loss += _recursion(net, model, y, x_true, x0, cfg.window, on_window)
        if cfg.gamma:
            epoch_loss += cfg.gamma * float(np.sum(net.phi ** 2))
        if not math.isfinite(epoch_loss):
            raise TrainingDivergenceError("GainNet loss is not finite; try a smaller eta", epoch=epoch, phase=phase)
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best_state = epoch_loss, copy.deepcopy(net.state_dict())
        if epoch >= DIVERGENCE_WINDOW and epoch_loss > DIVERGENCE_FACTOR * history[epoch - DIVERGENCE_WINDOW]:
            raise TrainingDivergenceError("GainNet loss grew 10x; try a smaller eta", epoch=epoch, phase=phase)
        if epoch % cfg.log_every == 0:
            logger.info("GainNet epoch %d loss %.6e", epoch, epoch_loss)

    net.load_state_dict(best_state)
    return net, history


def bptt_loss_and_grad(net: GainNet, model, y, x_true, x0, gamma: float = 0.0) -> Tuple[float, np.ndarray]:
    """Loss of one full (untruncated) recursion and its exact gradient with respect to phi"""
    y_t = torch.as_tensor(np.asarray(y, float), dtype=DTYPE)
    x_t = torch.as_tensor(np.asarray(x_true, float), dtype=DTYPE)
    x0_t = torch.as_tensor(np.asarray(x0, float), dtype=DTYPE)
    captured = {}

    def keep(loss, _share):
        captured["loss"] = loss

    _recursion(net, model, y_t, x_t, x0_t, None, keep)
    loss = captured["loss"]
    if gamma:
        loss = loss + gamma * torch.sum(parameters_to_vector(net.parameters()) ** 2)
    grads = torch.autograd.grad(loss, list(net.parameters()))
    return float(loss.detach()), torch.cat([g.reshape(-1) for g in grads]).numpy()


def clone(net: GainNet) -> GainNet:
    return copy.deepcopy(net)


# --- Persistence ---

def save_checkpoint(net: GainNet, path, cfg_hash: Optional[str] = None) -> Path:
    payload = {
        "kind": "gainnet",
        "feature_dim": net.feature_dim,
        "hidden_dim": net.hidden_dim,
        "n_x": net.n_x,
        "n_y": net.n_y,
        "phi": [float(v) for v in net.phi],
        "normalizer": net.feature_scale.tolist(),
        "config_hash": cfg_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(payload), encoding="utf-8")
    return path


def load_checkpoint(path) -> GainNet:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read checkpoint {path}: {e}") from e
    if payload.get("kind") != "gainnet":
        raise ConfigurationError(f"{path} is not a GainNet checkpoint")
    net = GainNet(payload["n_x"], payload["n_y"], payload["hidden_dim"])
    vector_to_parameters(torch.as_tensor(payload["phi"], dtype=DTYPE), net.parameters())
    with torch.no_grad():
        net.feature_scale.copy_(torch.as_tensor(payload["normalizer"], dtype=DTYPE))
    return net
