"""Shared fixtures: reference plants, tiny networks and a scalar linear-Gaussian model"""
import numpy as np
import pytest
import torch

from neuro_dse.filters import LinearGaussianModel
from neuro_dse.models import PipelineConfig, PlantConfig
from neuro_dse.odenet import OdeNet
from neuro_dse.plant import build_reference_plant
from neuro_dse.scenario_io import generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def plant():
    """NM-3 with droop control and the default load step"""
    return build_reference_plant()


@pytest.fixture(scope="session")
def equilibrium(plant):
    return plant.equilibrium()


@pytest.fixture(scope="session")
def quiet_plant():
    """NM-3 without the load step"""
    return build_reference_plant(PlantConfig(load_step=None))


@pytest.fixture(scope="session")
def quiet_equilibrium(quiet_plant):
    return quiet_plant.equilibrium()


@pytest.fixture
def tiny_odenet():
    return OdeNet(state_dim=2, input_dim=3, hidden_dims=(6, 6), seed=3)


@pytest.fixture
def scalar_model():
    """x' = 0.9 x, y = x"""
    return LinearGaussianModel(F=[[0.9]], H=[[1.0]])


@pytest.fixture(scope="session")
def small_cfg():
    """Pipeline config small enough for a unit test"""
    return PipelineConfig.parse({
        "horizon": 0.03,
        "n_train": 2,
        "seed": 5,
        "outer_max_iters": 2,
        "odenet": {"epochs": 3, "hidden_dims": [6, 6], "batch_len": 10, "eta": 1e-3},
        "gainnet": {"epochs": 1, "hidden_dim": 8, "window": 10, "n_train_trajectories": 1},
    })


@pytest.fixture(scope="session")
def small_dataset(small_cfg):
    return generate_dataset(small_cfg)


def bias_only(net: OdeNet, bias: np.ndarray) -> OdeNet:
    """Zero every weight and bias, then set the last layer's bias"""
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        net.net[-1].bias.copy_(torch.as_tensor(bias, dtype=torch.float64))
    return net
