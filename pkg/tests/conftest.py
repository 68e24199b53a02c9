import numpy as np
import pytest

from mamba_ghost.data import random_tokens
from mamba_ghost.model import ModelConfig, init_model

TINY = ModelConfig(model_dim=8, expand=2, heads=4, head_dim=4, groups=2, state_dim=4,
                   n_layers=2, conv_width=3, vocab=256)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return init_model(TINY, seed=7)


@pytest.fixture
def tiny_tokens():
    return random_tokens(3, 12, seed=3)


@pytest.fixture(scope="session")
def desk_model():
    return init_model(ModelConfig(), seed=42)


@pytest.fixture(scope="session")
def desk_calib():
    return random_tokens(8, 64, seed=42)


def naive_scan(x, b_bar, a_bar, c_prime, D):
    """Scalar-loop reference for a single sequence: x (L,H,P) etc."""
    L, H, P = x.shape
    G, N = c_prime.shape[1:]
    K = H // G
    state = np.zeros((H, P, N))
    y = np.zeros((L, H, P))
    for t in range(L):
        for h in range(H):
            g = h // K
            for p in range(P):
                acc = 0.0
                for n in range(N):
                    state[h, p, n] = a_bar[t, h] * state[h, p, n] + x[t, h, p] * b_bar[t, h, n]
                    acc += state[h, p, n] * c_prime[t, g, n]
                y[t, h, p] = acc + D[h] * x[t, h, p]
    return y, state
