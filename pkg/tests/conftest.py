import numpy as np
import pytest

from addit.attention import AttentionState
from addit.model import ModelConfig, ToyMMDiT


def rng_for(seed):
    return np.random.default_rng(seed)


def random_state(rng, heads=2, n_p=3, n_img=5, n_src=None, d=8, scale=1.0):
    def g(n):
        return rng.standard_normal((heads, n, d)) * scale

    n_src = n_img if n_src is None else n_src
    extended = n_src > 0
    return AttentionState(
        q_p=g(n_p), q_img=g(n_img), k_p=g(n_p), k_img=g(n_img), v_p=g(n_p), v_img=g(n_img),
        k_src=g(n_src) if extended else None, v_src=g(n_src) if extended else None,
    )


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(dim=32, num_heads=2, head_dim=16, image_grid=(8, 8), latent_channels=4,
                       max_prompt_len=8)


@pytest.fixture(scope="session")
def small_model(small_config):
    return ToyMMDiT(small_config)


@pytest.fixture(scope="session")
def default_model():
    return ToyMMDiT()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
