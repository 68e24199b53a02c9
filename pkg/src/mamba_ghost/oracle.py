"""Independent checks of the scorer: brute-force channel removal, the diagonal
LTI stationary variance, rank agreement, and a planted phantom/corporeal model.

Nothing here calls the scorer's accumulation path except to produce the
"predicted" column that the brute-force numbers are compared against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .baselines import magnitude_score
from .data import random_tokens
from .errors import DimensionError, InstabilityError, ParameterError
from .model import (BlockSignals, ModelConfig, ModelWeights, as_token_batch, block_signals,
                    discretize, init_model, layer_inputs, ssm_scan)
from .pipeline import sequential_prune
from .scorer import SaliencyAccumulator, finalize, score_layer

# ---------------------------------------------------------------------------
# brute-force local loss


def _ssm_only(sig: BlockSignals, b_bar=None, c_prime=None) -> np.ndarray:
    """y_ssm with the feedthrough term removed (D = 0)."""
    H = sig.x_prime.shape[-2]
    y, _, _ = ssm_scan(sig.x_prime, sig.b_bar if b_bar is None else b_bar, sig.a_bar,
                       sig.c_prime if c_prime is None else c_prime, np.zeros(H, dtype=sig.x_prime.dtype))
    return y


def channel_loss_from_signals(sig: BlockSignals, group: int, channel: int, n_samples: int,
                              dense_y: Optional[np.ndarray] = None) -> float:
    """Mean over samples of the summed squared y_ssm change when state
    column ``channel`` of every head in ``group`` is removed."""
    G, N = sig.c_prime.shape[-2:]
    if not (0 <= group < G and 0 <= channel < N):
        raise IndexError(f"state channel ({group}, {channel}) outside G={G}, N={N}")
    H = sig.x_prime.shape[-2]
    K = H // G
    if dense_y is None:
        dense_y = _ssm_only(sig)
    b_bar = sig.b_bar.copy()
    b_bar[..., group * K:(group + 1) * K, channel] = 0.0   # H_{., i} stays 0 from a zero start
    c_prime = sig.c_prime.copy()
    c_prime[..., group, channel] = 0.0
    diff = dense_y - _ssm_only(sig, b_bar, c_prime)
    return float(np.sum(diff * diff)) / n_samples


def bruteforce_channel_loss(weights: ModelWeights, layer: int, channel: tuple[int, int], calib) -> float:
    """Expected cumulative local error of dropping ``channel`` = (g, i) in ``layer``.

    Upstream activations come from the dense model.
    """
    tokens = as_token_batch(calib, weights.config.vocab)
    u = layer_inputs(tokens, weights, layer)
    sig = block_signals(u, weights.layers[layer], weights.config)
    return channel_loss_from_signals(sig, channel[0], channel[1], tokens.shape[0])


def _rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def channel_loss_table(weights: ModelWeights, calib, layers=None) -> list[list]:
    """Rows (layer, group, channel, bruteforce, predicted, rel_err) for every
    channel.

    ``bruteforce`` is a per-sample mean, so the scorer's prediction is
    Z * S_i^2 / |D_cal| = K * P * S_i^2 (the summed loss equals Z * S_i^2).
    """
    cfg = weights.config
    tokens = as_token_batch(calib, cfg.vocab)
    rows = []
    for j in (range(cfg.n_layers) if layers is None else layers):
        u = layer_inputs(tokens, weights, j)
        sig = block_signals(u, weights.layers[j], cfg)
        dense_y = _ssm_only(sig)
        acc = score_layer(u, weights.layers[j], cfg)
        table = finalize(acc, "pq", layer=j)
        per_sample = acc.normalizer / tokens.shape[0]
        for g in range(cfg.groups):
            for i in range(cfg.state_dim):
                bf = channel_loss_from_signals(sig, g, i, tokens.shape[0], dense_y)
                pred = per_sample * float(table.scores[g, i]) ** 2
                rows.append([j, g, i, bf, pred, _rel_err(bf, pred)])
    return rows


# ---------------------------------------------------------------------------
# LTI reference


def analytic_lti_controllability(a_bar: float, b_bar: float) -> float:
    """Stationary E[h^2] of h_t = a h_{t-1} + b x_t with unit white-noise x."""
    if not abs(a_bar) < 1:
        raise InstabilityError(f"|a_bar| = {abs(a_bar)} >= 1 has no stationary variance")
    return b_bar * b_bar / (1.0 - a_bar * a_bar)


def simulate_lti_energy(a_bar: float = 0.5, b_bar: float = 1.0, length: int = 100_000,
                        n_sequences: int = 64, seed: int = 42) -> float:
    """Empirical mean of H^2 from the model's own scan on a constant-dynamics
    single-channel layer driven by unit Gaussian white noise."""
    if not 0 < a_bar < 1:
        raise ParameterError("a_bar must lie in (0, 1) for the positive-step construction")
    rng = np.random.default_rng(seed)
    # pick (delta, A_log, B') so discretisation lands exactly on (a_bar, b_bar)
    delta = -math.log(a_bar)
    a_bar_arr, b_bar_arr = discretize(np.full((n_sequences, length, 1), delta), np.zeros(1),
                                      np.full((n_sequences, length, 1, 1), b_bar / delta))
    x = rng.standard_normal((n_sequences, length, 1, 1))
    c_prime = np.ones((n_sequences, length, 1, 1))
    total = np.zeros(1)

    def observe(t, hidden, _c):
        total[0] += float(np.sum(hidden * hidden))

    ssm_scan(x, b_bar_arr, a_bar_arr, c_prime, np.zeros(1), observer=observe)
    return float(total[0] / (n_sequences * length))


# ---------------------------------------------------------------------------
# rank agreement


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    sorted_v = v[order]
    ranks = np.empty(len(v), dtype=np.float64)
    start = 0
    while start < len(v):
        stop = start
        while stop + 1 < len(v) and sorted_v[stop + 1] == sorted_v[start]:
            stop += 1
        ranks[order[start:stop + 1]] = 0.5 * (start + stop) + 1.0
        start = stop + 1
    return ranks


def rank_agreement(scores_a, scores_b, k: Optional[int] = None) -> tuple[float, float]:
    """Spearman correlation (average ranks for ties, 0 if either side is
    constant) and the overlap fraction of the two top-``k`` index sets."""
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"rank_agreement: lengths {a.size} and {b.size} differ")
    n = a.size
    if n == 0:
        raise DimensionError("rank_agreement needs at least one score")
    ra, rb = _average_ranks(a), _average_ranks(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    rho = 0.0 if denom == 0 else float(np.dot(da, db)) / denom
    k = max(1, n // 2) if k is None else k
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in [1, {n}]")
    top_a = set(np.argsort(-a, kind="stable")[:k].tolist())
    top_b = set(np.argsort(-b, kind="stable")[:k].tolist())
    return rho, len(top_a & top_b) / k


# ---------------------------------------------------------------------------
# phantom / corporeal construction


@dataclass
class PhantomScenario:
    weights: ModelWeights
    phantom: tuple[int, int, int]      # (layer, group, channel)
    corporeal: tuple[int, int, int]

    def planted(self) -> dict:
        return {"phantom": self.phantom, "corporeal": self.corporeal}


PHANTOM_ROW_NORM = 0.05
CORPOREAL_ROW_NORM = 5.0
PHANTOM_CONV_GAIN = 10.0


def build_phantom_scenario(config: ModelConfig, seed: int = 42) -> PhantomScenario:
    """Random model with one phantom and one corporeal channel planted in layer 0.

    Embeddings are confined to the first half of the model dimensions and share
    a common direction ``v``.  The phantom's B/C rows are tiny and point along
    ``v`` while its conv taps carry a large gain, so it is very active; the
    corporeal's rows are large but live in the unused half of the space, so its
    B'/C' are exactly zero on any token sequence.
    """
    if config.state_dim < 4:
        raise ParameterError("phantom scenario needs state_dim >= 4")
    if config.n_layers < 1 or config.model_dim < 2:
        raise ParameterError("phantom scenario needs at least one layer and model_dim >= 2")
    weights = init_model(config, seed)
    rng = np.random.default_rng([seed, 1])
    M, half = config.model_dim, config.model_dim // 2
    v = np.zeros(M)
    v[:half] = rng.standard_normal(half)
    v /= np.linalg.norm(v)
    weights.embedding[:, half:] = 0.0
    weights.embedding += v

    group = 0
    p_ch, c_ch = (int(c) for c in rng.choice(config.state_dim, size=2, replace=False))
    sl, cs = config.in_proj_slices(), config.conv_slices()
    layer = weights.layers[0]
    w_corp = np.zeros(M)
    w_corp[half:] = rng.standard_normal(M - half)
    w_corp *= CORPOREAL_ROW_NORM / np.linalg.norm(w_corp)
    for block in ("B", "C"):
        p_row = sl[block].start + group * config.state_dim + p_ch
        c_row = sl[block].start + group * config.state_dim + c_ch
        layer.W_in[p_row] = PHANTOM_ROW_NORM * v
        layer.W_in[c_row] = w_corp
        layer.b_in[[p_row, c_row]] = 0.0
        p_conv = cs[block].start + group * config.state_dim + p_ch
        layer.conv_filters[p_conv] = PHANTOM_CONV_GAIN
        layer.conv_bias[[p_conv, cs[block].start + group * config.state_dim + c_ch]] = 0.0
    weights.validate()
    return PhantomScenario(weights, (0, group, p_ch), (0, group, c_ch))


def y_ssm(weights: ModelWeights, tokens, layer: int) -> np.ndarray:
    """Layer's SSM output (with D) given the model's own upstream activations."""
    u = layer_inputs(tokens, weights, layer)
    sig = block_signals(u, weights.layers[layer], weights.config)
    y, _, _ = ssm_scan(sig.x_prime, sig.b_bar, sig.a_bar, sig.c_prime, weights.layers[layer].D)
    return y


# ---------------------------------------------------------------------------
# check runners (shared by tests and the CLI)


def check_identity(config: Optional[ModelConfig] = None, seed: int = 42, n_samples: int = 8,
                   seq_len: int = 256, tokens=None, tol: float = 1e-9) -> dict:
    config = config or ModelConfig()
    weights = init_model(config, seed)
    if tokens is None:
        tokens = random_tokens(n_samples, seq_len, seed, config.vocab)
    rows = channel_loss_table(weights, tokens)
    max_rel = max(r[5] for r in rows) if rows else 0.0
    return {"check": "identity", "passed": bool(max_rel < tol), "max_rel_err": max_rel,
            "tolerance": tol, "channels": len(rows), "rows": rows}


def check_lti(a_bar: float = 0.5, b_bar: float = 1.0, length: int = 100_000,
              n_sequences: int = 64, seed: int = 42, tol: float = 0.05) -> dict:
    expected = analytic_lti_controllability(a_bar, b_bar)
    empirical = simulate_lti_energy(a_bar, b_bar, length, n_sequences, seed)
    rel = float(abs(empirical - expected) / expected)
    return {"check": "lti", "passed": bool(rel < tol), "expected": expected, "empirical": empirical,
            "rel_err": rel, "tolerance": tol}


def check_phantom(config: Optional[ModelConfig] = None, seed: int = 42, n_samples: int = 8,
                  seq_len: int = 256, min_ratio: float = 2.0) -> dict:
    config = config or ModelConfig()
    scen = build_phantom_scenario(config, seed)
    tokens = random_tokens(n_samples, seq_len, seed, config.vocab)
    (j, pg, pi), (_, cg, ci) = scen.phantom, scen.corporeal
    kappa = 1.0 / (config.groups * config.state_dim)

    u = layer_inputs(tokens, scen.weights, j)
    ghost = finalize(score_layer(u, scen.weights.layers[j], config), "pq", j)
    mag = magnitude_score(scen.weights.layers[j], config, j)

    g_w, g_mask, _ = sequential_prune(scen.weights, tokens, "ghost", kappa, seed)
    m_w, m_mask, _ = sequential_prune(scen.weights, tokens, "magnitude", kappa, seed)
    dense_y = y_ssm(scen.weights, tokens, j)
    mse_ghost = float(np.mean((y_ssm(g_w, tokens, j) - dense_y) ** 2))
    mse_mag = float(np.mean((y_ssm(m_w, tokens, j) - dense_y) ** 2))
    result = {
        "check": "phantom",
        "phantom": scen.phantom, "corporeal": scen.corporeal,
        "ghost_score_phantom": float(ghost.scores[pg, pi]),
        "ghost_score_corporeal": float(ghost.scores[cg, ci]),
        "magnitude_phantom": float(mag.scores[pg, pi]),
        "magnitude_corporeal": float(mag.scores[cg, ci]),
        "ghost_keeps_phantom": bool(g_mask.keep[j, pg, pi]),
        "ghost_prunes_corporeal": not bool(g_mask.keep[j, cg, ci]),
        "magnitude_prunes_phantom": not bool(m_mask.keep[j, pg, pi]),
        "magnitude_keeps_corporeal": bool(m_mask.keep[j, cg, ci]),
        "mse_ghost": mse_ghost, "mse_magnitude": mse_mag, "min_ratio": min_ratio,
    }
    result["passed"] = (result["ghost_keeps_phantom"] and result["ghost_prunes_corporeal"]
                        and result["magnitude_prunes_phantom"] and result["magnitude_keeps_corporeal"]
                        and mse_mag > 0 and mse_ghost * min_ratio <= mse_mag)
    return result
