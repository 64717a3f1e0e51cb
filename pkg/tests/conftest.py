import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from backbone import ModelConfig  # noqa: E402
from grids import GridSpec, VariableCatalog, compute_norm_stats, synth_toy  # noqa: E402
from perturbation import PerturbationConfig  # noqa: E402


@pytest.fixture
def toy_grid():
    return GridSpec.regular(8, 16)


@pytest.fixture
def toy_catalog():
    return VariableCatalog.toy()


@pytest.fixture
def advection_store(toy_grid, toy_catalog):
    return synth_toy("advection", toy_grid, 40, seed=0, catalog=toy_catalog)


@pytest.fixture
def advection_stats(advection_store):
    return compute_norm_stats(advection_store)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        n_in=3,
        n_out=2,
        t_hist=2,
        t_pred=3,
        grid_shape=(8, 16),
        stage_dims=(8, 16, 16, 16),
        encoder_depth=1,
        decoder_depth=1,
        window=4,
        mlp_ratio=2.0,
        prognostic_channels=(0, 1),
    )


@pytest.fixture
def tiny_pert_cfg():
    return PerturbationConfig(latent_scale=3, latent_channels=2)


@pytest.fixture
def tiny_history(tiny_cfg):
    generator = torch.Generator().manual_seed(0)
    return torch.randn(2, tiny_cfg.n_in, tiny_cfg.t_hist, *tiny_cfg.grid_shape, generator=generator)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
