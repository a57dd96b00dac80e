"""ODE-Net forward pass, rollouts, losses, gradients, training and checkpoints"""
import numpy as np
import pytest
import torch

from conftest import bias_only
from neuro_dse import odenet
from neuro_dse.errors import ConfigurationError, RolloutDivergenceError
from neuro_dse.models import TrainConfig
from neuro_dse.odenet import OdeNet, PlainObjective

DT = 1e-3


def _random_data(n_traj=2, n=6, seed=0):
    rng = np.random.default_rng(seed)
    x = [0.1 * rng.standard_normal((n, 2)) for _ in range(n_traj)]
    u = [0.1 * rng.standard_normal((n, 3)) for _ in range(n_traj)]
    return x, u


def _fd_grad(net, loss_fn, h=1e-6):
    theta = net.theta
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        step = np.zeros_like(theta)
        step[i] = h
        net.set_theta(theta + step)
        hi = loss_fn()
        net.set_theta(theta - step)
        lo = loss_fn()
        grad[i] = (hi - lo) / (2 * h)
    net.set_theta(theta)
    return grad


# --- Forward and rollout ---

def test_zero_parameters_give_zero_rate(tiny_odenet):
    tiny_odenet.set_theta(np.zeros(tiny_odenet.n_params))
    out = odenet.forward(tiny_odenet, [0.3, -0.2], [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(out, [0.0, 0.0])


def test_bias_only_output(tiny_odenet):
    bias_only(tiny_odenet, [0.5, -1.5])
    out = odenet.forward(tiny_odenet, np.ones((4, 2)), np.zeros((4, 3)))
    np.testing.assert_allclose(out, np.tile([0.5, -1.5], (4, 1)))


def test_rollout_of_constant_rate(tiny_odenet):
    """Row 0 is x0, row k is x0 + c k dt"""
    c = np.array([0.2, -0.4])
    bias_only(tiny_odenet, c)
    x0 = np.array([1.0, 2.0])
    traj = odenet.rollout(tiny_odenet, x0, np.zeros((10, 3)), DT)
    assert traj.shape == (11, 2)
    expected = x0 + np.arange(11)[:, None] * DT * c
    np.testing.assert_allclose(traj, expected, atol=1e-13)


def test_rollout_of_zero_network_is_constant(tiny_odenet):
    tiny_odenet.set_theta(np.zeros(tiny_odenet.n_params))
    traj = odenet.rollout(tiny_odenet, [0.7, 0.1], np.random.default_rng(1).normal(size=(5, 3)), DT)
    np.testing.assert_array_equal(traj, np.tile([0.7, 0.1], (6, 1)))


def test_rollout_respects_n_steps(tiny_odenet):
    traj = odenet.rollout(tiny_odenet, [0.0, 0.0], np.zeros((10, 3)), DT, n_steps=4)
    assert traj.shape == (5, 2)
    with pytest.raises(ConfigurationError):
        odenet.rollout(tiny_odenet, [0.0, 0.0], np.zeros((3, 3)), DT, n_steps=4)


def test_rollout_divergence_is_reported(tiny_odenet):
    bias_only(tiny_odenet, [1e308, 1e308])
    with pytest.raises(RolloutDivergenceError) as info:
        odenet.rollout(tiny_odenet, [0.0, 0.0], np.zeros((3, 3)), 1.0)
    assert info.value.step == 1


def test_input_dimension_mismatch(tiny_odenet):
    with pytest.raises(ConfigurationError):
        odenet.forward(tiny_odenet, [0.0, 0.0], [0.0, 0.0])


def test_input_jacobians_match_differences(tiny_odenet):
    x, u = np.array([0.1, -0.3]), np.array([0.2, 0.0, -0.5])
    J_x, J_u = odenet.input_jacobians(tiny_odenet, x, u)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (odenet.forward(tiny_odenet, x + e, u) - odenet.forward(tiny_odenet, x - e, u)) / (2 * h)
        np.testing.assert_allclose(J_x[:, j], fd, atol=1e-8)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (odenet.forward(tiny_odenet, x, u + e) - odenet.forward(tiny_odenet, x, u - e)) / (2 * h)
        np.testing.assert_allclose(J_u[:, j], fd, atol=1e-8)


def test_step_jacobian_is_identity_for_constant_rate(tiny_odenet):
    bias_only(tiny_odenet, [1.0, 2.0])
    J_x, J_u = odenet.step_jacobians(tiny_odenet, np.zeros(2), np.zeros(3), DT)
    np.testing.assert_allclose(J_x, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(J_u, 0.0, atol=1e-14)


# --- Loss and gradient ---

def test_perfect_fit_costs_only_regularization(tiny_odenet):
    c = np.array([0.3, 0.1])
    bias_only(tiny_odenet, c)
    x = [np.array([0.5, -0.5]) + np.arange(8)[:, None] * DT * c]
    u = [np.zeros((8, 3))]
    loss, _ = odenet.loss_plain(tiny_odenet, x, u, DT)
    assert loss == pytest.approx(0.0, abs=1e-24)
    gamma = 0.01
    loss, _ = odenet.loss_plain(tiny_odenet, x, u, DT, gamma=gamma)
    assert loss == pytest.approx(gamma * np.sum(c ** 2), rel=1e-9)


def test_plain_gradient_matches_differences(tiny_odenet):
    x, u = _random_data()
    loss, grad = odenet.loss_plain(tiny_odenet, x, u, DT, gamma=1e-3, batch_len=3)
    assert grad.shape == (tiny_odenet.n_params,)
    fd = _fd_grad(tiny_odenet, lambda: odenet.loss_plain(tiny_odenet, x, u, DT, 1e-3, 3)[0])
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)


def test_refined_gradient_matches_differences(tiny_odenet):
    rng = np.random.default_rng(4)
    measured = [0.1 * rng.standard_normal((5, 2))]
    est_in = [0.1 * rng.standard_normal((5, 3))]
    est_ex = [0.1 * rng.standard_normal((5, 2))]
    loss, grad = odenet.loss_refined(tiny_odenet, measured, est_in, est_ex, DT)
    fd = _fd_grad(tiny_odenet, lambda: odenet.loss_refined(tiny_odenet, measured, est_in, est_ex, DT)[0])
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)


def test_windows_chain_through_shared_samples():
    x, u = _random_data(n_traj=1, n=5)
    objective = PlainObjective(x, u, DT, batch_len=3)
    assert len(objective.windows) == 1
    window = objective.windows[0]
    assert window.x0.shape == (2, 2)
    np.testing.assert_array_equal(window.x0[1].numpy(), x[0][2])
    assert window.targets.shape == (2, 2, 2)


def test_objective_rejects_short_trajectories():
    with pytest.raises(ConfigurationError):
        PlainObjective([np.zeros((1, 2))], [np.zeros((1, 3))], DT)
    with pytest.raises(ConfigurationError):
        PlainObjective([np.zeros((4, 2))], [np.zeros((3, 3))], DT)


# --- Training ---

def test_zero_epochs_leave_the_model_alone(tiny_odenet):
    x, u = _random_data()
    before = tiny_odenet.theta
    model, history = odenet.train(tiny_odenet, PlainObjective(x, u, DT), TrainConfig(epochs=0))
    assert history == []
    np.testing.assert_array_equal(model.theta, before)


def test_training_reduces_the_loss():
    x, u = _random_data(n=20)
    net = OdeNet(2, 3, (6, 6), seed=3)
    cfg = TrainConfig(epochs=30, eta=1e-2, hidden_dims=[6, 6], log_every=10)
    net, history = odenet.train(net, PlainObjective(x, u, DT, batch_len=5), cfg, calibrate=True)
    assert len(history) == 30
    final, _ = odenet.loss_plain(net, x, u, DT, batch_len=5)
    assert final == pytest.approx(min(history), rel=1e-9)
    assert final < history[0]


def test_training_is_deterministic():
    x, u = _random_data(n=10)
    cfg = TrainConfig(epochs=5, eta=1e-2, hidden_dims=[6, 6])
    a, _ = odenet.train(OdeNet(2, 3, (6, 6), seed=3), PlainObjective(x, u, DT), cfg)
    b, _ = odenet.train(OdeNet(2, 3, (6, 6), seed=3), PlainObjective(x, u, DT), cfg)
    np.testing.assert_array_equal(a.theta, b.theta)


def test_unknown_optimizer(tiny_odenet):
    with pytest.raises(ConfigurationError):
        odenet.make_optimizer("lbfgs", tiny_odenet.parameters(), 1e-3)


# --- Checkpoints ---

def test_checkpoint_restores_parameters_and_scaling(tmp_path, tiny_odenet):
    x, u = _random_data()
    tiny_odenet.calibrate(np.vstack(x), np.vstack(u), DT)
    path = odenet.save_checkpoint(tiny_odenet, tmp_path / "odenet.json", cfg_hash="abc")
    restored = odenet.load_checkpoint(path)
    np.testing.assert_array_equal(restored.theta, tiny_odenet.theta)
    sample_x, sample_u = np.array([0.1, 0.2]), np.array([0.3, -0.1, 0.0])
    np.testing.assert_array_equal(odenet.forward(restored, sample_x, sample_u),
                                  odenet.forward(tiny_odenet, sample_x, sample_u))
    assert odenet.checkpoint_payload(restored)["hidden_dims"] == [6, 6]


def test_checkpoint_of_wrong_kind(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"kind": "gainnet"}', encoding="utf-8")
    with pytest.raises(ConfigurationError):
        odenet.load_checkpoint(path)


def test_loss_history_csv(tmp_path):
    path = odenet.write_loss_history([3.0, 2.0, 1.5], tmp_path / "loss.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,loss"
    assert lines[-1] == "2,1.5"


# --- Regularization and seeding ---

def _teacher_student_data(n=20, seed=0):
    rng = np.random.default_rng(seed)
    teacher = OdeNet(2, 3, (6, 6), seed=11)
    u = 0.5 * rng.standard_normal((n + 1, 3))
    x = odenet.rollout(teacher, [0.1, -0.1], u, DT, n_steps=n)
    return [x], [u]


def test_perfect_fit_gradient_is_the_regularizer_gradient(tiny_odenet):
    c = np.array([0.3, 0.1])
    bias_only(tiny_odenet, c)
    x = [np.array([0.5, -0.5]) + np.arange(8)[:, None] * DT * c]
    u = [np.zeros((8, 3))]
    gamma = 0.01
    _, grad = odenet.loss_plain(tiny_odenet, x, u, DT, gamma=gamma)
    np.testing.assert_allclose(grad, 2 * gamma * tiny_odenet.theta, atol=1e-10)


def test_heavy_regularization_shrinks_theta():
    x, u = _teacher_student_data()
    norms = {}
    for gamma in (0.0, 1e3):
        cfg = TrainConfig(epochs=20, eta=2e-4, gamma=gamma, optimizer="sgd", hidden_dims=[6, 6], batch_len=None)
        net, _ = odenet.train(OdeNet(2, 3, (6, 6), seed=3), PlainObjective(x, u, DT), cfg)
        norms[gamma] = np.linalg.norm(net.theta)
    assert norms[1e3] < 0.1 * norms[0.0]


def test_seeded_construction_and_training_leave_the_global_rng_alone():
    x, u = _random_data(n=10)
    state = torch.get_rng_state()
    net = OdeNet(2, 3, (6, 6), seed=3)
    odenet.train(net, PlainObjective(x, u, DT), TrainConfig(epochs=3, eta=1e-2, hidden_dims=[6, 6]))
    assert torch.equal(torch.get_rng_state(), state)
    assert not np.array_equal(OdeNet(2, 3, (6, 6), seed=3).theta, OdeNet(2, 3, (6, 6), seed=4).theta)
