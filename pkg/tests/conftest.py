import numpy as np
import pytest
from scipy.linalg import solve_sylvester

from luenreg.config import benchmark_path, load_config
from luenreg.plant import Ball, Interval, PlantModel, derive_core
from luenreg.synth import synthesize

S_ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])
Q_ROW_LINEAR = np.array([0.0, -1.0])     # q0(z) = -z2 for alpha = z1 on the rotation


def sylvester_T(pair, S=S_ROT, q_row=Q_ROW_LINEAR):
    """T with ``F T - T S = G q_row``."""
    return solve_sylvester(pair.F, -S, np.outer(pair.G, q_row))


class LinearGamma:
    """Exact linear output map ``eta -> K eta``, usable in place of a fitted gamma."""

    def __init__(self, K):
        self.K = np.asarray(K, float)
        self.x = np.zeros((1, len(self.K)))

    def __call__(self, eta):
        return np.asarray(eta, float) @ self.K


def zero_plant(n=2):
    return PlantModel.from_strings(n, 1, ["0"] * n, "0", "0", ["zeta"], "0", "y1",
                                   Ball(np.zeros(n), 1.0), Interval(-1, 1), name="zero")


@pytest.fixture(scope="session")
def linear_cfg():
    return load_config(benchmark_path("linear"))


@pytest.fixture(scope="session")
def vdp_cfg():
    return load_config(benchmark_path("vanderpol"))


@pytest.fixture(scope="session")
def adversarial_cfg():
    return load_config(benchmark_path("adversarial"))


@pytest.fixture(scope="session")
def linear_synth(linear_cfg):
    return synthesize(linear_cfg.plant, linear_cfg.synthesis)


@pytest.fixture(scope="session")
def vdp_synth(vdp_cfg):
    return synthesize(vdp_cfg.plant, vdp_cfg.synthesis)


@pytest.fixture(scope="session")
def linear_core(linear_cfg):
    return derive_core(linear_cfg.plant)


@pytest.fixture(scope="session")
def vdp_core(vdp_cfg):
    return derive_core(vdp_cfg.plant)


@pytest.fixture(scope="session")
def linear_T(linear_synth):
    return sylvester_T(linear_synth.pair)
