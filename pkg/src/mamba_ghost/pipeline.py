"""Soft masking and the sequential layer-by-layer calibration loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .baselines import magnitude_score, random_mask
from .errors import CalibrationError, DimensionError, NumericError, ParameterError
from .model import LayerWeights, ModelConfig, ModelWeights, as_token_batch, block_forward, embed
from .scorer import (PruneMask, SaliencyAccumulator, check_kappa, finalize, merge,
                     pool_and_threshold)

METHODS = ("ghost", "ghost-p", "ghost-q", "magnitude", "random")
GHOST_MODES = {"ghost": "pq", "ghost-p": "p_only", "ghost-q": "q_only"}


def state_rows(config: ModelConfig, group: int, channel: int) -> dict[str, int]:
    """Indices touched by state channel (group, channel) in W_in/b_in and the conv."""
    sl, cs = config.in_proj_slices(), config.conv_slices()
    flat = group * config.state_dim + channel
    return {"in_B": sl["B"].start + flat, "in_C": sl["C"].start + flat,
            "conv_B": cs["B"].start + flat, "conv_C": cs["C"].start + flat}


def apply_mask(layer: LayerWeights, keep: np.ndarray, config: ModelConfig) -> LayerWeights:
    """Zero the B/C projection rows, their biases and the matching conv taps and biases."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (config.groups, config.state_dim):
        raise DimensionError(f"layer mask must be {(config.groups, config.state_dim)}, got {keep.shape}")
    out = layer.copy()
    for g, i in np.argwhere(~keep):
        rows = state_rows(config, int(g), int(i))
        for key in ("in_B", "in_C"):
            out.W_in[rows[key], :] = 0.0
            out.b_in[rows[key]] = 0.0
        for key in ("conv_B", "conv_C"):
            out.conv_filters[rows[key], :] = 0.0
            out.conv_bias[rows[key]] = 0.0
    return out


def apply_model_mask(weights: ModelWeights, mask: PruneMask) -> ModelWeights:
    if mask.keep.shape != (weights.config.n_layers, weights.config.groups, weights.config.state_dim):
        raise DimensionError("mask does not match the model configuration")
    return ModelWeights(weights.config, weights.embedding.copy(),
                        [apply_mask(lw, mask.keep[j], weights.config)
                         for j, lw in enumerate(weights.layers)],
                        weights.final_norm_gamma.copy())


def sparsity(mask: PruneMask) -> float:
    """Pruned fraction 1 - ||keep||_0 / (layers * G * N)."""
    if mask.keep.size == 0:
        return 0.0
    return 1.0 - int(mask.keep.sum()) / mask.keep.size


def compact_state_bytes(config: ModelConfig, mask: PruneMask, bytes_per_scalar: int = 4) -> int:
    """Recurrent-state bytes if pruned channels were physically removed."""
    retained = mask.keep.sum(axis=-1)                     # (layers, G)
    return int(retained.sum()) * config.heads_per_group * config.head_dim * bytes_per_scalar


@dataclass
class PruneReport:
    method: str
    kappa: float
    thresholds: list
    retained_per_group: list
    achieved_sparsity: float
    layer_passes: list
    timings: dict = field(default_factory=dict)
    divergence_before: Optional[dict] = None
    divergence_after: Optional[dict] = None
    accumulator_scalars: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return None if np.isnan(v) else ("inf" if v > 0 else "-inf")
            return v
        return {
            "method": self.method,
            "kappa": self.kappa,
            "thresholds": [clean(t) for t in self.thresholds],
            "retained_per_group": self.retained_per_group,
            "achieved_sparsity": self.achieved_sparsity,
            "layer_passes": self.layer_passes,
            "accumulator_scalars": self.accumulator_scalars,
            "timings_s": self.timings,
            "divergence_before": self.divergence_before,
            "divergence_after": self.divergence_after,
            **self.extra,
        }

    def table(self) -> str:
        lines = [f"method={self.method} kappa={self.kappa} achieved_sparsity={self.achieved_sparsity:.6f}",
                 f"{'layer':>5}  {'tau':>12}  {'passes':>6}  retained per group"]
        for j, (tau, r) in enumerate(zip(self.thresholds, self.retained_per_group)):
            lines.append(f"{j:>5}  {tau:>12.6g}  {self.layer_passes[j]:>6}  {r}")
        for phase, secs in self.timings.items():
            lines.append(f"time[{phase}] = {secs:.3f} s")
        if self.divergence_after is not None:
            d = self.divergence_after
            lines.append(f"divergence: mse={d['mse']:.6g} kl={d['kl']:.6g} ce_delta={d['ce_delta']:.6g}")
        return "\n".join(lines)


def _shards(x: np.ndarray, batch_size: Optional[int]):
    if not batch_size or batch_size >= x.shape[0]:
        return [x]
    return [x[s:s + batch_size] for s in range(0, x.shape[0], batch_size)]


def sequential_prune(weights: ModelWeights, calib, method: str = "ghost", kappa: float = 0.5,
                     seed: int = 0, batch_size: Optional[int] = None,
                     eval_tokens=None) -> tuple[ModelWeights, PruneMask, PruneReport]:
    """Score, mask and re-propagate one layer at a time.

    For each layer: (a) a forward pass over the calibration inputs streams
    transients into an accumulator (GHOST methods only; the data-free
    baselines skip it), (b) the layer mask is chosen by pooled thresholding,
    (c) the mask is applied, (d) the masked layer is run again to produce the
    next layer's inputs.
    """
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")
    check_kappa(kappa)
    cfg = weights.config
    tokens = as_token_batch(calib, cfg.vocab) if calib is not None and len(calib) else None
    if tokens is None or tokens.shape[0] == 0:
        raise CalibrationError("sequential_prune needs a nonempty calibration set")

    timings = {"score": 0.0, "mask": 0.0, "update": 0.0}
    rand = random_mask(cfg, kappa, seed) if method == "random" else None
    keep_all = np.ones((cfg.n_layers, cfg.groups, cfg.state_dim), dtype=bool)
    thresholds, passes, acc_sizes, new_layers = [], [], [], []

    x = embed(tokens, weights)
    for j, layer in enumerate(weights.layers):
        n_passes = 0
        t0 = time.perf_counter()
        if method in GHOST_MODES:
            acc = SaliencyAccumulator.for_config(cfg)
            for shard in _shards(x, batch_size):
                part = SaliencyAccumulator.for_config(cfg)
                block_forward(shard, layer, cfg, observer=part.observe)
                part.count(shard.shape[0], shard.shape[1])
                acc = merge(acc, part)
            n_passes += 1
            acc_sizes.append(acc.storage_scalars())
            table = finalize(acc, GHOST_MODES[method], layer=j)
        elif method == "magnitude":
            table = magnitude_score(layer, cfg, j)
        t1 = time.perf_counter()

        if method == "random":
            keep, tau = rand.keep[j], float("nan")
        else:
            keep, tau = pool_and_threshold(table, kappa)
        masked = apply_mask(layer, keep, cfg)
        t2 = time.perf_counter()

        outs = []
        for shard in _shards(x, batch_size):
            out, _ = block_forward(shard, masked, cfg)
            outs.append(out)
        x = np.concatenate(outs, axis=0)
        n_passes += 1
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activations after pruning layer {j}")
        t3 = time.perf_counter()

        timings["score"] += t1 - t0
        timings["mask"] += t2 - t1
        timings["update"] += t3 - t2
        keep_all[j] = keep
        thresholds.append(tau)
        passes.append(n_passes)
        new_layers.append(masked)

    pruned = ModelWeights(cfg, weights.embedding.copy(), new_layers, weights.final_norm_gamma.copy())
    mask = PruneMask(keep_all, kappa, method, seed, thresholds)
    report = PruneReport(method, kappa, thresholds, mask.retained_per_group().tolist(),
                         sparsity(mask), passes, timings, accumulator_scalars=acc_sizes)
    if eval_tokens is not None:
        from .evaluate import divergence
        report.divergence_before = divergence(weights, weights, eval_tokens).to_dict()
        report.divergence_after = divergence(weights, pruned, eval_tokens).to_dict()
    return pruned, mask, report
