import numpy as np
import pytest
from hypothesis import settings

from ddimedit.datasets import toy_datasets
from ddimedit.denoiser import DenoiserConfig, init_denoiser
from ddimedit.finetune import finetune_full, precompute_latents, train_base
from ddimedit.guidance import ChannelStats, EditRecipe
from ddimedit.schedule import make_linear_schedule

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# Small image benchmark shared by the module tests: 8x8 blobs, T=100.
TOY_T = 100
TOY_BETA_END = 0.05
TOY_RECIPE = dict(t0=50, S_for=20, S_gen=6, lr=1e-3)


@pytest.fixture(scope="session")
def toy_schedule():
    return make_linear_schedule(TOY_T, 1e-4, TOY_BETA_END)


@pytest.fixture(scope="session")
def toy_images():
    return toy_datasets("blobs-images-32", 12, 1234, size=8)


@pytest.fixture(scope="session")
def toy_model(toy_schedule):
    data = toy_datasets("blobs-images-32", 512, 0, size=8)
    cfg = DenoiserConfig("mlp", (1, 8, 8), widths=(64, 64), time_embed_dim=32, max_timestep=TOY_T)
    return train_base(init_denoiser(cfg, 0), data, toy_schedule, 800, 2e-3, np.random.default_rng(0))


@pytest.fixture(scope="session")
def toy_recipe():
    return EditRecipe(K=2, N=12, **TOY_RECIPE)


@pytest.fixture(scope="session")
def bright_model(toy_model, toy_images, toy_recipe):
    cache = precompute_latents(toy_model, toy_images, toy_recipe)
    return finetune_full(toy_model, cache, ChannelStats(1), toy_recipe)


@pytest.fixture(scope="session")
def shift_model(toy_model, toy_images, toy_recipe):
    from dataclasses import replace

    recipe = replace(toy_recipe, y_tar="shift-right")
    cache = precompute_latents(toy_model, toy_images, recipe)
    return finetune_full(toy_model, cache, ChannelStats(1), recipe)


# 2-D Gaussian benchmark: x0 ~ N(mu, s^2 I).
GAUSS_MU = np.array([1.0, 0.0])
GAUSS_S = 0.5


def gaussian_optimal_eps(x_t, t, s, mu=GAUSS_MU, std=GAUSS_S):
    ab = s.alpha_bar[np.asarray(t)][..., None]
    return np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * mu) / (ab * std**2 + 1.0 - ab)


def train_gaussian(seed=0, steps=2000):
    s = make_linear_schedule()
    data = toy_datasets("gaussian2d", 4096, seed, mu=tuple(GAUSS_MU), s=GAUSS_S)
    cfg = DenoiserConfig("mlp", (2,), widths=(64, 64), time_embed_dim=32, max_timestep=s.T)
    return train_base(init_denoiser(cfg, seed), data, s, steps, 2e-3, np.random.default_rng(seed), batch_size=256)


@pytest.fixture(scope="session")
def gaussian_model():
    return train_gaussian()


# Acceptance tests record one line per criterion here; printed after the run.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
