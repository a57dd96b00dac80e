"""EKF / UKF steps, the hybrid process model and the filter runner"""
import numpy as np
import pytest

from conftest import bias_only
from neuro_dse.errors import ConfigurationError, FilterDivergenceError
from neuro_dse.filters import (
    FilterState,
    HybridModel,
    LinearGaussianModel,
    NoiseSpec,
    UkfParams,
    augment_with_parameter,
    ekf_correct,
    ekf_predict,
    kalman_filter_lti,
    kalman_gain,
    open_loop_rollout,
    run_filter,
    ukf_correct,
    ukf_step,
)
from neuro_dse.models import DerKind, NoiseConfig, PlantConfig
from neuro_dse.odenet import OdeNet
from neuro_dse.plant import (
    MeasurementMap,
    PartitionedState,
    build_reference_plant,
    measurement_channels,
    simulate_ground_truth,
)
from neuro_dse.scenario_io import MeasurementMask

F2 = [[1.0, 0.1], [0.0, 0.95]]
H2 = [[1.0, 0.0]]
W2 = 1e-3 * np.eye(2)
R2 = [[0.01]]


def _linear_data(n=30, seed=0):
    rng = np.random.default_rng(seed)
    F = np.array(F2)
    x = np.array([1.0, -0.5])
    ys = []
    for _ in range(n):
        ys.append([x[0] + rng.normal(0.0, 0.1)])
        x = F @ x + rng.normal(0.0, np.sqrt(1e-3), size=2)
    return np.array(ys)


def _hybrid(plant, seed=0):
    mask = MeasurementMask.full(plant)
    measurement = MeasurementMap(plant, measurement_channels(plant, mask))
    net = OdeNet(plant.dim_ex, len(plant.u_in_indices), (6, 6), seed=seed)
    return HybridModel(plant, net, measurement, 1e-3)


# --- Gain and correction ---

def test_scalar_gain():
    K = kalman_gain(np.array([[1.0]]), np.array([[1.0]]), np.array([[1.0]]))
    assert K[0, 0] == pytest.approx(0.5)


def test_gain_vanishes_for_untrusted_measurements():
    K = kalman_gain(np.array([[1.0]]), np.array([[1.0]]), np.array([[1e9]]))
    assert abs(K[0, 0]) < 1e-8


def test_gain_matches_dense_inverse():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((4, 4))
    sigma = A @ A.T + 0.1 * np.eye(4)
    J = rng.standard_normal((3, 4))
    R = np.diag([0.1, 0.2, 0.3])
    expected = sigma @ J.T @ np.linalg.inv(J @ sigma @ J.T + R)
    np.testing.assert_allclose(kalman_gain(sigma, J, R), expected, rtol=1e-10, atol=1e-12)


def test_ill_conditioned_innovation_falls_back_to_pinv():
    diag = {}
    sigma = np.diag([1.0, 1e-20])
    J = np.eye(2)
    R = np.diag([1e-20, 1e-20])
    K = kalman_gain(sigma, J, R, diag)
    assert diag["pinv_fallback"] is True
    assert np.all(np.isfinite(K))


def test_correction_moves_state_along_the_gain(scalar_model):
    fs = ekf_correct(np.array([0.0]), np.array([[1.0]]), np.array([[0.5]]), np.array([0.2]), scalar_model, 3)
    assert fs.x[0] == pytest.approx(0.1)
    assert fs.sigma[0, 0] == pytest.approx(0.5)
    assert fs.k == 3


def test_zero_innovation_keeps_the_prediction(scalar_model):
    fs = ekf_correct(np.array([0.7]), np.array([[1.0]]), np.array([[0.5]]), np.array([0.7]), scalar_model, 1)
    assert fs.x[0] == 0.7


def test_joseph_form_matches_standard_form_for_optimal_gain():
    model = LinearGaussianModel(F2, [[1.0, 0.0], [0.0, 1.0]])
    sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
    R = np.diag([0.5, 0.4])
    K = kalman_gain(sigma, model.H, R)
    a = ekf_correct(np.zeros(2), sigma, K, np.ones(2), model, 0)
    b = ekf_correct(np.zeros(2), sigma, K, np.ones(2), model, 0, R=R, joseph=True)
    np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-12)
    with pytest.raises(ConfigurationError):
        ekf_correct(np.zeros(2), sigma, K, np.ones(2), model, 0, joseph=True)


def test_gain_shape_is_checked(scalar_model):
    with pytest.raises(ConfigurationError):
        ekf_correct(np.array([0.0]), np.array([[1.0]]), np.ones((2, 1)), np.array([0.0]), scalar_model, 0)


def test_scalar_prediction(scalar_model):
    noise = NoiseSpec(W=[[0.1]], R=[[1.0]])
    x_pred, sigma_pred, J = ekf_predict(FilterState(x=np.array([1.0]), sigma=np.array([[2.0]]), k=0),
                                        scalar_model, noise)
    assert x_pred[0] == pytest.approx(0.9)
    assert sigma_pred[0, 0] == pytest.approx(0.81 * 2.0 + 0.1)
    np.testing.assert_array_equal(J, [[0.9]])


# --- Noise ---

def test_noise_spec_validation():
    with pytest.raises(ConfigurationError):
        NoiseSpec(W=[[1.0, 0.5], [0.0, 1.0]], R=[[1.0]])
    with pytest.raises(ConfigurationError):
        NoiseSpec(W=[[-1.0]], R=[[1.0]])
    with pytest.raises(ConfigurationError):
        NoiseSpec(W=[[1.0]], R=[[0.0]])


def test_noise_spec_for_hybrid_model(plant):
    model = _hybrid(plant)
    noise = NoiseSpec.for_model(model, NoiseConfig(measurement_var=1e-4, process_var=1e-2), 1e-3)
    diag = np.diag(noise.W)
    assert diag[0] == 1e-6
    assert diag[2] == pytest.approx(1e-5)
    assert noise.R.shape == (len(model.meas_names), len(model.meas_names))
    assert noise.R[0, 0] == 1e-4


# --- Runner on linear models ---

@pytest.mark.parametrize("backend", ["ekf", "ukf"])
def test_runner_matches_closed_form_kalman_filter(backend):
    model = LinearGaussianModel(F2, H2)
    y = _linear_data()
    x0 = np.array([0.0, 0.0])
    result = run_filter(model, NoiseSpec(W2, R2), y, x0, sigma0=1.0, backend=backend,
                        ukf_params=UkfParams(alpha=1.0, beta=2.0, kappa=2.0))
    expected, covs = kalman_filter_lti(F2, H2, W2, R2, y, x0, np.eye(2))
    np.testing.assert_allclose(result.estimates, expected, atol=1e-8)
    np.testing.assert_allclose(result.sigma_traces, [np.trace(P) for P in covs], atol=1e-8)
    assert result.estimates.shape == (30, 2)
    assert result.covariance_propagated


def test_runner_is_deterministic():
    model = LinearGaussianModel(F2, H2)
    y = _linear_data(seed=2)
    a = run_filter(model, NoiseSpec(W2, R2), y, np.zeros(2))
    b = run_filter(model, NoiseSpec(W2, R2), y, np.zeros(2))
    np.testing.assert_array_equal(a.estimates, b.estimates)


def test_runner_input_checks(scalar_model):
    noise = NoiseSpec([[0.1]], [[1.0]])
    with pytest.raises(ConfigurationError):
        run_filter(scalar_model, noise, np.zeros((5, 2)), np.zeros(1))
    with pytest.raises(ConfigurationError):
        run_filter(scalar_model, noise, np.zeros((5, 1)), np.zeros(1), gain_source="learned")
    with pytest.raises(ConfigurationError):
        run_filter(scalar_model, noise, np.zeros((5, 1)), np.zeros(1), backend="pf")
    with pytest.raises(ConfigurationError):
        run_filter(scalar_model, noise, np.zeros((5, 1)), np.zeros(2))


class ConstantGain:
    def __init__(self, value):
        self.value = np.atleast_2d(value)
        self.resets = 0

    def reset(self):
        self.resets += 1

    def gain(self, k, y, y_pred, x_pred, x_post_prev):
        return self.value


def test_learned_gain_path_skips_covariance(scalar_model):
    gain = ConstantGain(0.5)
    y = np.ones((4, 1))
    result = run_filter(scalar_model, NoiseSpec([[0.1]], [[1.0]]), y, np.zeros(1), sigma0=2.0,
                        gain_source="learned", learned_gain=gain)
    assert gain.resets == 1
    assert not result.covariance_propagated
    np.testing.assert_allclose(result.sigma_traces, 2.0)
    x, expected = 0.0, []
    for k in range(4):
        pred = x if k == 0 else 0.9 * x
        x = pred + 0.5 * (1.0 - pred)
        expected.append(x)
    np.testing.assert_allclose(result.estimates[:, 0], expected)


def test_divergence_reports_step_and_last_good_state():
    model = LinearGaussianModel([[1e4]], [[1.0]])
    with pytest.raises(FilterDivergenceError) as info:
        run_filter(model, NoiseSpec([[0.1]], [[1.0]]), np.zeros((5, 1)), np.ones(1),
                   gain_source="learned", learned_gain=ConstantGain(0.0))
    assert info.value.step == 2
    np.testing.assert_array_equal(info.value.last_good, [1e4])


def test_open_loop_rollout(scalar_model):
    out = open_loop_rollout(scalar_model, np.array([1.0]), 4)
    np.testing.assert_allclose(out[:, 0], [1.0, 0.9, 0.81, 0.729])


# --- Hybrid model ---

def test_hybrid_layout(plant):
    model = _hybrid(plant)
    assert model.dims == (2, 14, 0)
    assert model.layout.names[:2] == ("ex.i_D", "ex.i_Q")
    assert model.n == 16


def test_hybrid_dimension_checks(plant):
    mask = MeasurementMask.full(plant)
    measurement = MeasurementMap(plant, measurement_channels(plant, mask))
    with pytest.raises(ConfigurationError):
        HybridModel(plant, OdeNet(3, len(plant.u_in_indices)), measurement, 1e-3)
    with pytest.raises(ConfigurationError):
        HybridModel(plant, OdeNet(2, 1), measurement, 1e-3)
    augmented = HybridModel(plant, OdeNet(2, plant.dim_in, augmented=True), measurement, 1e-3)
    assert len(augmented.u_idx) == plant.dim_in


def test_hybrid_step_holds_equilibrium_with_still_network(quiet_plant, quiet_equilibrium):
    model = _hybrid(quiet_plant)
    bias_only(model.odenet, np.zeros(2))
    x = model.compose(quiet_equilibrium)
    nxt = model.step(x, 0)
    np.testing.assert_allclose(nxt, x, atol=1e-10)


def test_hybrid_jacobian_matches_differences(plant, equilibrium):
    model = _hybrid(plant, seed=2)
    x = model.compose(equilibrium)
    J = model.jacobian(x, 0)
    n = len(x)
    fd = np.zeros((n, n))
    for j in range(n):
        h = 1e-6 * max(1.0, abs(x[j]))
        e = np.zeros(n)
        e[j] = h
        fd[:, j] = (model.step(x + e, 0) - model.step(x - e, 0)) / (2 * h)
    np.testing.assert_allclose(J, fd, atol=1e-6)


def test_parameter_augmentation():
    plant = build_reference_plant(PlantConfig(swap_kind=DerKind.VSG))
    model = augment_with_parameter(_hybrid(plant), ["der2.H"], 1e-6)
    assert model.dims == (2, 15, 1)
    assert model.layout.names[-1] == "param.der2.H"
    start = plant.equilibrium()
    start.h_param = np.array([plant.nominal_param("der2.H")])
    x = model.compose(start)
    assert x[-1] == 2.0
    assert model.step(x, 0)[-1] == 2.0
    J = model.jacobian(x, 0)
    assert J[-1, -1] == 1.0
    assert np.all(J[-1, :-1] == 0.0)
    with pytest.raises(ConfigurationError):
        model.compose(PartitionedState(x_ex=np.zeros(2), x_in=np.zeros(15)))


def test_unknown_parameter_is_rejected(plant):
    with pytest.raises(ConfigurationError, match="Unknown parameter"):
        augment_with_parameter(_hybrid(plant), ["der2.H"], 1e-6)


# --- Randomized linear systems ---

def _random_lti(seed=7, n=40):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    F = 0.9 * A / np.max(np.abs(np.linalg.eigvals(A)))
    H = rng.standard_normal((2, 3))
    B = rng.standard_normal((3, 3))
    W = 1e-2 * B @ B.T / 3 + 1e-3 * np.eye(3)
    R = 0.05 * np.eye(2)
    x = rng.standard_normal(3)
    ys = []
    for _ in range(n):
        ys.append(H @ x + rng.multivariate_normal(np.zeros(2), R))
        x = F @ x + rng.multivariate_normal(np.zeros(3), W)
    return F, H, W, R, np.array(ys)


@pytest.mark.parametrize("backend", ["ekf", "ukf"])
def test_default_sigma_points_match_the_closed_form_filter(backend):
    F, H, W, R, y = _random_lti()
    result = run_filter(LinearGaussianModel(F, H), NoiseSpec(W, R), y, np.zeros(3), sigma0=1.0, backend=backend)
    expected, covs = kalman_filter_lti(F, H, W, R, y, np.zeros(3), np.eye(3))
    np.testing.assert_allclose(result.estimates, expected, atol=1e-8)
    np.testing.assert_allclose(result.sigma_traces, [np.trace(P) for P in covs], atol=1e-8)


def test_innovations_are_white_on_a_matched_model():
    y = _linear_data(n=3000, seed=3)
    result = run_filter(LinearGaussianModel(F2, H2), NoiseSpec(W2, R2), y, np.array([1.0, -0.5]))
    e = result.innovations[100:, 0]
    lag1 = np.sum(e[1:] * e[:-1]) / np.sum(e ** 2)
    assert abs(lag1) < 0.2


# --- Reference plant ---

def test_frozen_parameter_leaves_the_estimate_unchanged():
    plant = build_reference_plant(PlantConfig(swap_kind=DerKind.VSG))
    base = _hybrid(plant)
    augmented = augment_with_parameter(base, ["der2.H"], 0.0)
    start = plant.equilibrium()
    x0 = base.compose(start)
    start.h_param = np.array([plant.nominal_param("der2.H")])
    x0_aug = augmented.compose(start)
    clean = base.measure(x0, 0)
    y = clean + 1e-3 * np.random.default_rng(0).standard_normal((30, len(clean)))

    plain = run_filter(base, NoiseSpec.for_model(base, NoiseConfig(), 1e-3), y, x0)
    sigma0 = np.diag(np.r_[np.full(base.n, 1e-4), 0.0])
    frozen = run_filter(augmented, NoiseSpec.for_model(augmented, NoiseConfig(), 1e-3), y, x0_aug, sigma0=sigma0)
    np.testing.assert_array_equal(frozen.estimates[:, -1], 2.0)
    np.testing.assert_allclose(frozen.estimates[:, :-1], plain.estimates, atol=1e-8)


def _reference_run(plant, equilibrium, n=150):
    model = _hybrid(plant)
    bias_only(model.odenet, np.zeros(2))
    truth = simulate_ground_truth(plant, equilibrium, 1e-3, n, NoiseConfig(), rng_seed=1)
    return model, NoiseSpec.for_model(model, NoiseConfig(), 1e-3), truth.measurements, model.compose(equilibrium)


def test_ekf_and_ukf_agree_on_the_reference_plant(plant, equilibrium):
    model, noise, y, x0 = _reference_run(plant, equilibrium)
    ekf = run_filter(model, noise, y, x0, backend="ekf")
    ukf = run_filter(model, noise, y, x0, backend="ukf")
    assert np.sqrt(np.mean((ekf.estimates - ukf.estimates) ** 2)) < 5e-4


@pytest.mark.parametrize("backend", ["ekf", "ukf"])
def test_covariance_stays_symmetric_psd_on_the_reference_plant(backend, plant, equilibrium):
    model, noise, y, x0 = _reference_run(plant, equilibrium)
    sigma0 = 1e-4 * np.eye(model.n)
    if backend == "ekf":
        K = kalman_gain(sigma0, model.measure_jacobian(x0, 0), noise.R)
        fs = ekf_correct(x0, sigma0, K, y[0], model, 0, noise.R)
    else:
        fs, _, _ = ukf_correct(x0, sigma0, model, y[0], 0, noise.R)
    for k in range(1, len(y)):
        if backend == "ekf":
            x_pred, sigma_pred, _ = ekf_predict(fs, model, noise)
            K = kalman_gain(sigma_pred, model.measure_jacobian(x_pred, k), noise.R)
            fs = ekf_correct(x_pred, sigma_pred, K, y[k], model, k, noise.R)
        else:
            fs = ukf_step(fs, model, noise, y[k])
        np.testing.assert_array_equal(fs.sigma, fs.sigma.T)
        assert np.min(np.linalg.eigvalsh(fs.sigma)) > -1e-12
        assert np.isfinite(np.trace(fs.sigma))
