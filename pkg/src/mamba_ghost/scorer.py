"""GHOST saliency: streamed H^2 * C'^2 sums, finalisation and inter-group pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CalibrationError, DimensionError, NumericError, ParameterError
from .model import LayerWeights, ModelConfig, ModelWeights, block_forward, embed

MODES = ("pq", "p_only", "q_only")

# Multiplying a float kappa by an integer channel count can land a hair below
# an integer (0.29 * 100 = 28.999...); counts are snapped within this slack.
_COUNT_SLACK = 1e-9


@dataclass
class SaliencyAccumulator:
    """Running per-group sums for one layer; O(G*N) storage.

    ``sum_s`` holds sum H^2 C'^2, ``sum_p`` sum H^2 (both over heads of the
    group and head channels), ``sum_q`` sum C'^2.  All sums are float64.
    """
    groups: int
    state_dim: int
    heads_per_group: int
    head_dim: int
    sum_s: np.ndarray = field(default=None)
    sum_p: np.ndarray = field(default=None)
    sum_q: np.ndarray = field(default=None)
    n_samples: int = 0
    steps_seen: int = 0

    def __post_init__(self):
        shape = (self.groups, self.state_dim)
        for name in ("sum_s", "sum_p", "sum_q"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape, dtype=np.float64))

    @classmethod
    def for_config(cls, config: ModelConfig) -> "SaliencyAccumulator":
        return cls(config.groups, config.state_dim, config.heads_per_group, config.head_dim)

    @property
    def normalizer(self) -> int:
        """Z = |D_cal| * K * P."""
        return self.n_samples * self.heads_per_group * self.head_dim

    def observe(self, t: int, hidden: np.ndarray, c_prime: np.ndarray) -> None:
        accumulate_step(self, hidden, c_prime)

    def count(self, n_samples: int, length: int) -> None:
        """Record that ``n_samples`` sequences of ``length`` steps were observed."""
        self.n_samples += n_samples
        self.steps_seen += n_samples * length

    def storage_scalars(self) -> int:
        return self.sum_s.size + self.sum_p.size + self.sum_q.size

    def copy(self) -> "SaliencyAccumulator":
        return SaliencyAccumulator(self.groups, self.state_dim, self.heads_per_group, self.head_dim,
                                   self.sum_s.copy(), self.sum_p.copy(), self.sum_q.copy(),
                                   self.n_samples, self.steps_seen)


def accumulate_step(acc: SaliencyAccumulator, hidden: np.ndarray, c_prime: np.ndarray) -> SaliencyAccumulator:
    """Add one time step. ``hidden`` is (..., H, P, N), ``c_prime`` (..., G, N).

    Leading batch axes are summed over.  Updates ``acc`` in place and returns it.
    """
    G, N, K = acc.groups, acc.state_dim, acc.heads_per_group
    hidden = np.asarray(hidden, dtype=np.float64)
    c_prime = np.asarray(c_prime, dtype=np.float64)
    if hidden.shape[-3:] != (G * K, acc.head_dim, N) or c_prime.shape[-2:] != (G, N) \
            or hidden.shape[:-3] != c_prime.shape[:-2]:
        raise DimensionError(f"accumulate_step: hidden {hidden.shape} / c_prime {c_prime.shape} "
                             f"do not match G={G}, K={K}, P={acc.head_dim}, N={N}")
    if not (np.isfinite(hidden).all() and np.isfinite(c_prime).all()):
        raise NumericError("accumulate_step: non-finite transient state")
    lead = hidden.shape[:-3]
    h2 = (hidden * hidden).sum(axis=-2)                    # (..., H, N)
    h2 = h2.reshape(lead + (G, K, N)).sum(axis=-2)         # (..., G, N)
    c2 = c_prime * c_prime
    batch_axes = tuple(range(len(lead)))
    acc.sum_s += (h2 * c2).sum(axis=batch_axes)
    acc.sum_p += h2.sum(axis=batch_axes)
    acc.sum_q += c2.sum(axis=batch_axes)
    return acc


def merge(a: SaliencyAccumulator, b: SaliencyAccumulator) -> SaliencyAccumulator:
    if (a.groups, a.state_dim, a.heads_per_group, a.head_dim) != \
            (b.groups, b.state_dim, b.heads_per_group, b.head_dim):
        raise DimensionError("cannot merge accumulators of different layer shapes")
    return SaliencyAccumulator(a.groups, a.state_dim, a.heads_per_group, a.head_dim,
                               a.sum_s + b.sum_s, a.sum_p + b.sum_p, a.sum_q + b.sum_q,
                               a.n_samples + b.n_samples, a.steps_seen + b.steps_seen)


@dataclass
class SaliencyTable:
    """Per-group scores for one layer.

    ``raw`` is what ranking uses; ``scores`` is the normalised, square-rooted
    value (monotone in ``raw``).
    """
    layer: int
    scores: np.ndarray      # (G, N)
    raw: np.ndarray         # (G, N)
    mode: str = "pq"
    normalizer: float = 1.0


def finalize(acc: SaliencyAccumulator, mode: str = "pq", layer: int = 0) -> SaliencyTable:
    if mode not in MODES:
        raise ParameterError(f"unknown scoring mode {mode!r}; expected one of {MODES}")
    if acc.n_samples <= 0 or acc.steps_seen <= 0:
        raise CalibrationError("finalize: accumulator has seen no calibration data")
    if mode == "q_only":
        raw, z = acc.sum_q, acc.steps_seen
    else:
        raw, z = (acc.sum_s if mode == "pq" else acc.sum_p), acc.normalizer
    return SaliencyTable(layer, np.sqrt(raw / z), raw.copy(), mode, float(z))


def prune_count(kappa: float, total: int) -> int:
    """floor(kappa * total), the exact number of channels pruned per layer."""
    check_kappa(kappa)
    return min(total, math.floor(kappa * total + _COUNT_SLACK))


def check_kappa(kappa: float) -> None:
    if not (0.0 <= kappa <= 1.0):
        raise ParameterError(f"sparsity kappa must lie in [0, 1], got {kappa!r}")


def prune_order(rank_values: np.ndarray) -> np.ndarray:
    """Flat (g*N + i) indices in pruning order: ascending value, then (g, i)."""
    return np.argsort(np.asarray(rank_values).ravel(), kind="stable")


def pool_and_threshold(table: SaliencyTable, kappa: float) -> tuple[np.ndarray, float]:
    """Pool all G*N channels of a layer and prune the floor(kappa*G*N) lowest.

    Returns ``(keep, tau)``: a (G, N) boolean keep mask and the score of the
    lowest-ranked kept channel (+inf if everything is pruned, -inf if nothing is).
    """
    G, N = table.raw.shape
    m = prune_count(kappa, G * N)
    order = prune_order(table.raw)
    keep = np.ones(G * N, dtype=bool)
    keep[order[:m]] = False
    if m == G * N:
        tau = math.inf
    elif m == 0:
        tau = -math.inf
    else:
        tau = float(table.scores.ravel()[order[m]])
    return keep.reshape(G, N), tau


@dataclass
class PruneMask:
    keep: np.ndarray                 # (layers, G, N) bool
    kappa: float
    method: str
    seed: Optional[int] = None
    thresholds: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return self.keep.shape[0]

    def pruned_pairs(self, layer: int) -> list[tuple[int, int]]:
        return [(int(g), int(i)) for g, i in np.argwhere(~self.keep[layer])]

    def retained_per_group(self) -> np.ndarray:
        return self.keep.sum(axis=-1)


def score_layer(u: np.ndarray, layer: LayerWeights, config: ModelConfig) -> SaliencyAccumulator:
    """Forward ``u`` (B, L, M) through one block, streaming transients into an accumulator."""
    acc = SaliencyAccumulator.for_config(config)
    block_forward(u, layer, config, observer=acc.observe)
    acc.count(u.shape[0], u.shape[1])
    return acc


def ghost_tables(weights: ModelWeights, tokens, mode: str = "pq") -> list[SaliencyTable]:
    """Score every layer of an unmasked model in a single pass over ``tokens``."""
    h = embed(tokens, weights)
    tables = []
    for j, layer in enumerate(weights.layers):
        acc = SaliencyAccumulator.for_config(weights.config)
        h, _ = block_forward(h, layer, weights.config, observer=acc.observe)
        acc.count(h.shape[0], h.shape[1])
        tables.append(finalize(acc, mode, layer=j))
    return tables
