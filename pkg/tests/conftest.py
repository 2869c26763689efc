"""Shared fixtures: the Gaussian sanity posterior, small datasets, fixed seeds."""

import json

import numpy as np
import pytest

from flows.sivi import ConditionalBlock, ExplicitConditional, ImplicitMixer, NoiseFamily, SemiImplicitPosterior
from models.joint import GammaBetaPriors, NegBinomialModel, PoissonLogModel, ToyModel
from tools.distributions import Family, RngStream
from tools.ndcore import Mlp, ParamVector

SEED = 20180710


def gaussian_posterior(tau_sq: float = 0.5, sigma_sq: float = 0.5, m: float = 0.0,
                       noise: NoiseFamily = NoiseFamily.GAUSSIAN) -> SemiImplicitPosterior:
    """psi = sqrt(tau_sq) * eps + m, z | psi ~ N(psi, sigma_sq)."""
    layout = Mlp.layout_for([1, 1])
    mlp = Mlp([1, 1], ParamVector(np.array([np.sqrt(tau_sq), m]), layout))
    conditional = ExplicitConditional([ConditionalBlock(Family.MVN_DIAG, 1, variance=sigma_sq)])
    return SemiImplicitPosterior(ImplicitMixer(mlp, 1, noise), conditional, conditional.initial_xi(), 0, ["z1"])


@pytest.fixture
def sanity_posterior():
    return gaussian_posterior()


@pytest.fixture
def point_posterior():
    """Degenerate mixer: every psi is the bias."""
    return gaussian_posterior(noise=NoiseFamily.POINT)


@pytest.fixture
def standard_normal_model():
    return ToyModel("standard_normal")


@pytest.fixture
def rng():
    return RngStream(SEED)


@pytest.fixture
def mites_counts():
    """Red-mite frequency table expanded to 150 counts."""
    values = [0, 1, 2, 3, 4, 5, 6, 7]
    freqs = [70, 38, 17, 10, 9, 3, 2, 1]
    return np.repeat(values, freqs).astype(np.float64)


@pytest.fixture
def nb_model(mites_counts):
    return NegBinomialModel(mites_counts, GammaBetaPriors())


@pytest.fixture
def tiny_poislog_model():
    return PoissonLogModel(np.array([3.0, 1.0]), np.array([2.0, 1.0]), GammaBetaPriors())


@pytest.fixture
def write_config(tmp_path):
    """Write a config mapping (or raw text) to a file and return its path."""
    def _write(content, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(content if isinstance(content, str) else json.dumps(content))
        return path
    return _write
