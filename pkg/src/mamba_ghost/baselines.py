"""Data-free baselines: weight-magnitude scores and uniformly random masks."""

from __future__ import annotations

import numpy as np

from .model import LayerWeights, ModelConfig
from .scorer import PruneMask, SaliencyTable, check_kappa, prune_count


def projection_row_norms(layer: LayerWeights, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """l2 norms of the W_in rows producing B and C, each shaped (G, N)."""
    sl = config.in_proj_slices()
    shape = (config.groups, config.state_dim)
    W = np.asarray(layer.W_in, dtype=np.float64)
    nb = np.linalg.norm(W[sl["B"]], axis=1).reshape(shape)
    nc = np.linalg.norm(W[sl["C"]], axis=1).reshape(shape)
    return nb, nc


def magnitude_score(layer: LayerWeights, config: ModelConfig, layer_index: int = 0) -> SaliencyTable:
    """sqrt(||W_B row|| * ||W_C row||) per state channel; conv filters are ignored."""
    nb, nc = projection_row_norms(layer, config)
    raw = nb * nc
    return SaliencyTable(layer_index, np.sqrt(raw), raw, mode="magnitude")


def random_mask(config: ModelConfig, kappa: float, seed: int) -> PruneMask:
    """Prune a uniformly random floor(kappa*G*N) subset in every layer."""
    check_kappa(kappa)
    total = config.groups * config.state_dim
    m = prune_count(kappa, total)
    rng = np.random.default_rng(seed)
    keep = np.ones((config.n_layers, total), dtype=bool)
    for j in range(config.n_layers):
        keep[j, rng.permutation(total)[:m]] = False
    return PruneMask(keep.reshape(config.n_layers, config.groups, config.state_dim),
                     kappa, "random", seed, [float("nan")] * config.n_layers)
