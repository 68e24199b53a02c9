"""Mamba2 block and byte-level language model forward pass (numpy, CPU).

Array layout conventions used throughout the package:

* token batches are ``(B, L)`` integer arrays,
* residual-stream activations are ``(B, L, M)``,
* per-head signals are ``(..., L, H, P)``, group dynamics ``(..., L, G, N)``,
* hidden states are ``(..., H, P, N)`` per time step.

Head ``h`` belongs to group ``h // K`` with ``K = H / G``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

PRECISIONS = {"fast": np.float32, "oracle": np.float64}

# Observer signature for the scan: (t, H_t, C'_t) with H_t shaped (..., H, P, N)
# and C'_t shaped (..., G, N).
StepObserver = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 64
    expand: int = 2
    heads: int = 8
    head_dim: int = 16
    groups: int = 2
    state_dim: int = 16
    n_layers: int = 4
    conv_width: int = 4
    vocab: int = 256
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("model_dim", "expand", "heads", "head_dim", "groups",
                     "state_dim", "conv_width", "vocab"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.n_layers, (int, np.integer)) or self.n_layers < 0:
            raise ParameterError(f"n_layers must be a nonnegative integer, got {self.n_layers!r}")
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise ParameterError(f"eps must be a small positive real, got {self.eps!r}")
        if self.heads % self.groups:
            raise ParameterError(f"heads ({self.heads}) must be divisible by groups ({self.groups})")
        if self.expand * self.model_dim != self.heads * self.head_dim:
            raise ParameterError(
                f"expand*model_dim ({self.expand * self.model_dim}) must equal "
                f"heads*head_dim ({self.heads * self.head_dim})")

    @property
    def heads_per_group(self) -> int:
        return self.heads // self.groups

    @property
    def expanded_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def conv_channels(self) -> int:
        return self.expanded_dim + 2 * self.groups * self.state_dim

    @property
    def in_proj_dim(self) -> int:
        return 2 * self.expanded_dim + 2 * self.groups * self.state_dim + self.heads

    def group_of(self, head: int) -> int:
        return head // self.heads_per_group

    def heads_in_group(self, group: int) -> range:
        k = self.heads_per_group
        return range(group * k, (group + 1) * k)

    def in_proj_slices(self) -> dict[str, slice]:
        """Row ranges of W_in in the fixed order [z; x; B; C; delta]."""
        r, gn = self.expanded_dim, self.groups * self.state_dim
        bounds = np.cumsum([0, r, r, gn, gn, self.heads])
        names = ("z", "x", "B", "C", "delta")
        return {n: slice(int(a), int(b)) for n, a, b in zip(names, bounds[:-1], bounds[1:])}

    def conv_slices(self) -> dict[str, slice]:
        r, gn = self.expanded_dim, self.groups * self.state_dim
        return {"x": slice(0, r), "B": slice(r, r + gn), "C": slice(r + gn, r + 2 * gn)}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class LayerWeights:
    norm_gamma: np.ndarray       # (M,)
    W_in: np.ndarray             # (2R + 2GN + H, M)
    b_in: np.ndarray             # (2R + 2GN + H,)
    conv_filters: np.ndarray     # (R + 2GN, conv_width)
    conv_bias: np.ndarray        # (R + 2GN,)
    A_log: np.ndarray            # (H,)
    D: np.ndarray                # (H,)
    out_norm_gamma: np.ndarray   # (R,)
    W_out: np.ndarray            # (M, R)
    b_out: np.ndarray            # (M,)

    def expected_shapes(self, config: ModelConfig) -> dict[str, tuple]:
        return layer_shapes(config)

    def validate(self, config: ModelConfig) -> None:
        for name, shape in layer_shapes(config).items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise NumericError(f"{name} contains non-finite entries")

    def astype(self, dtype) -> "LayerWeights":
        return LayerWeights(**{k: np.asarray(v, dtype=dtype) for k, v in self.arrays().items()})

    def copy(self) -> "LayerWeights":
        return LayerWeights(**{k: v.copy() for k, v in self.arrays().items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def layer_shapes(config: ModelConfig) -> dict[str, tuple]:
    m, r, c = config.model_dim, config.expanded_dim, config.conv_channels
    return {
        "norm_gamma": (m,),
        "W_in": (config.in_proj_dim, m),
        "b_in": (config.in_proj_dim,),
        "conv_filters": (c, config.conv_width),
        "conv_bias": (c,),
        "A_log": (config.heads,),
        "D": (config.heads,),
        "out_norm_gamma": (r,),
        "W_out": (m, r),
        "b_out": (m,),
    }


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray                       # (vocab, M); the LM head is its transpose
    layers: list[LayerWeights] = field(default_factory=list)
    final_norm_gamma: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.final_norm_gamma is None:
            self.final_norm_gamma = np.ones(self.config.model_dim, dtype=self.embedding.dtype)
        self.layers = list(self.layers)

    def validate(self) -> None:
        cfg = self.config
        if len(self.layers) != cfg.n_layers:
            raise DimensionError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        if self.embedding.shape != (cfg.vocab, cfg.model_dim):
            raise DimensionError(f"embedding: expected {(cfg.vocab, cfg.model_dim)}, "
                                 f"got {self.embedding.shape}")
        if self.final_norm_gamma.shape != (cfg.model_dim,):
            raise DimensionError("final_norm_gamma has the wrong length")
        if not np.isfinite(self.embedding).all() or not np.isfinite(self.final_norm_gamma).all():
            raise NumericError("embedding or final norm contains non-finite entries")
        for j, layer in enumerate(self.layers):
            try:
                layer.validate(cfg)
            except (DimensionError, NumericError) as exc:
                raise type(exc)(f"layer {j}: {exc}") from None

    @property
    def dtype(self):
        return self.embedding.dtype

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, np.asarray(self.embedding, dtype=dtype),
                            [lw.astype(dtype) for lw in self.layers],
                            np.asarray(self.final_norm_gamma, dtype=dtype))

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, self.embedding.copy(),
                            [lw.copy() for lw in self.layers], self.final_norm_gamma.copy())


@dataclass
class TransientCapture:
    hidden: np.ndarray    # (..., L, H, P, N)
    c_prime: np.ndarray   # (..., L, G, N)


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelWeights:
    """Random desk-scale model: Gaussian matrices scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    m, r, h = config.model_dim, config.expanded_dim, config.heads
    embedding = rng.standard_normal((config.vocab, m)) / math.sqrt(m)
    layers = []
    for _ in range(config.n_layers):
        sl = config.in_proj_slices()
        b_in = np.zeros(config.in_proj_dim)
        # softplus(b_in[delta]) lands log-uniformly in [0.01, 0.1]
        dt = np.exp(rng.uniform(math.log(0.01), math.log(0.1), size=h))
        b_in[sl["delta"]] = dt + np.log(-np.expm1(-dt))
        layers.append(LayerWeights(
            norm_gamma=np.ones(m),
            W_in=rng.standard_normal((config.in_proj_dim, m)) / math.sqrt(m),
            b_in=b_in,
            conv_filters=rng.standard_normal((config.conv_channels, config.conv_width))
            / math.sqrt(config.conv_width),
            conv_bias=np.zeros(config.conv_channels),
            A_log=np.log(rng.uniform(1.0, 16.0, size=h)),
            D=np.ones(h),
            out_norm_gamma=np.ones(r),
            W_out=rng.standard_normal((m, r)) / math.sqrt(r),
            b_out=np.zeros(m),
        ))
    weights = ModelWeights(config, embedding, layers, np.ones(m))
    return weights.astype(dtype)


# ---------------------------------------------------------------------------
# elementwise pieces

def silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def rmsnorm(v: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    """RMS-normalise along the last axis and scale by ``gamma``."""
    v = np.asarray(v)
    gamma = np.asarray(gamma)
    if v.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"rmsnorm: vector length {v.shape[-1]} != gamma length {gamma.shape[-1]}")
    ms = np.mean(v * v, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return v / np.sqrt(ms + eps) * gamma


# ---------------------------------------------------------------------------
# block sub-operations

def input_projection(u_norm: np.ndarray, layer: LayerWeights, config: ModelConfig):
    """Split ``W_in @ u_norm + b_in`` into (z, x, B, C, delta_raw).

    B and C come back shaped ``(..., G, N)``; the rest keep a flat last axis.
    """
    u_norm = np.asarray(u_norm)
    if u_norm.shape[-1] != config.model_dim:
        raise DimensionError(f"input_projection: expected last axis {config.model_dim}, "
                             f"got {u_norm.shape[-1]}")
    proj = u_norm @ layer.W_in.T + layer.b_in
    sl = config.in_proj_slices()
    lead = proj.shape[:-1]
    gn_shape = lead + (config.groups, config.state_dim)
    return (proj[..., sl["z"]], proj[..., sl["x"]],
            proj[..., sl["B"]].reshape(gn_shape), proj[..., sl["C"]].reshape(gn_shape),
            proj[..., sl["delta"]])


def causal_depthwise_conv_silu(seq: np.ndarray, filters: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """Depthwise causal conv over the time axis (-2) followed by SiLU."""
    seq = np.asarray(seq)
    channels, width = filters.shape
    if seq.shape[-1] != channels or biases.shape != (channels,):
        raise DimensionError(f"conv: sequence has {seq.shape[-1]} channels, "
                             f"filters {channels}, biases {biases.shape}")
    T = seq.shape[-2]
    pad = [(0, 0)] * seq.ndim
    pad[-2] = (width - 1, 0)
    padded = np.pad(seq, pad)
    acc = np.broadcast_to(biases, seq.shape).copy()
    for w in range(width):
        acc += filters[:, w] * padded[..., w:w + T, :]
    return silu(acc)


def discretize(delta: np.ndarray, A_log: np.ndarray, B_prime: np.ndarray):
    """Return ``(a_bar, b_bar)`` with a_bar = exp(-delta*exp(A_log)) and b_bar = delta*B'.

    ``delta``/``A_log`` broadcast together; ``B_prime`` carries one extra
    trailing state axis.
    """
    delta = np.asarray(delta)
    if np.any(~(delta > 0)):
        raise ParameterError("discretize: step sizes must be strictly positive")
    a_bar = np.exp(delta * -np.exp(A_log))
    b_bar = delta[..., None] * np.asarray(B_prime)
    return a_bar, b_bar


def ssm_scan(x: np.ndarray, b_bar: np.ndarray, a_bar: np.ndarray, c_prime: np.ndarray,
             D: np.ndarray, h_init: Optional[np.ndarray] = None, capture: bool = False,
             observer: Optional[StepObserver] = None):
    """Sequential selective scan.

    x: (..., L, H, P); b_bar: (..., L, H, N); a_bar: (..., L, H);
    c_prime: (..., L, G, N); D: (H,).  Returns ``(y, h_final, capture)`` where
    ``capture`` is None unless requested.  ``observer`` is called after each
    state update with ``(t, H_t, C'_t)`` and must not keep references.
    """
    x, b_bar, a_bar, c_prime = (np.asarray(a) for a in (x, b_bar, a_bar, c_prime))
    *lead, L, H, P = x.shape
    G, N = c_prime.shape[-2:]
    if H % G or b_bar.shape[-3:] != (L, H, N) or a_bar.shape[-2:] != (L, H) \
            or c_prime.shape[-3] != L or np.shape(D) != (H,):
        raise DimensionError(f"ssm_scan: inconsistent shapes x{x.shape} b_bar{b_bar.shape} "
                             f"a_bar{a_bar.shape} c_prime{c_prime.shape} D{np.shape(D)}")
    K = H // G
    dtype = np.result_type(x, b_bar, a_bar, c_prime)
    state = np.zeros((*lead, H, P, N), dtype=dtype) if h_init is None else np.array(h_init, dtype=dtype)
    c_heads = np.repeat(c_prime, K, axis=-2)             # (..., L, H, N)
    y = np.empty(x.shape, dtype=dtype)
    hidden = np.empty((*lead, L, H, P, N), dtype=dtype) if capture else None
    for t in range(L):
        state = a_bar[..., t, :, None, None] * state \
            + x[..., t, :, :, None] * b_bar[..., t, :, None, :]
        if not np.isfinite(state).all():
            bad = np.argwhere(~np.isfinite(state))[0]
            raise NumericError(f"non-finite hidden state at t={t}, h={bad[len(lead)]}")
        y[..., t, :, :] = np.einsum("...hpn,...hn->...hp", state, c_heads[..., t, :, :]) \
            + D[:, None] * x[..., t, :, :]
        if capture:
            hidden[..., t, :, :, :] = state
        if observer is not None:
            observer(t, state, c_prime[..., t, :, :])
    cap = TransientCapture(hidden, c_prime.copy()) if capture else None
    return y, state, cap


@dataclass
class BlockSignals:
    """Everything the block computes between the input norm and the scan."""
    z: np.ndarray          # (..., L, R)
    x_prime: np.ndarray    # (..., L, H, P)
    b_prime: np.ndarray    # (..., L, G, N)
    c_prime: np.ndarray    # (..., L, G, N)
    delta: np.ndarray      # (..., L, H), post-softplus
    a_bar: np.ndarray      # (..., L, H)
    b_bar: np.ndarray      # (..., L, H, N)


def block_signals(u: np.ndarray, layer: LayerWeights, config: ModelConfig,
                  state_keep: Optional[np.ndarray] = None) -> BlockSignals:
    """Norm, project, conv+SiLU, softplus and discretise one block's input.

    ``state_keep`` (G, N bool) zeroes B' and C' entries after the conv.  It is
    the direct "drop the state column" reference against which weight masking
    is checked; pruning itself goes through the weights.
    """
    u = np.asarray(u)
    u_norm = rmsnorm(u, layer.norm_gamma, config.eps)
    z, x, B, C, delta_raw = input_projection(u_norm, layer, config)
    lead = x.shape[:-1]
    gn = config.groups * config.state_dim
    xbc = np.concatenate([x, B.reshape(lead + (gn,)), C.reshape(lead + (gn,))], axis=-1)
    xbc = causal_depthwise_conv_silu(xbc, layer.conv_filters, layer.conv_bias)
    cs = config.conv_slices()
    gshape = lead + (config.groups, config.state_dim)
    x_prime = xbc[..., cs["x"]].reshape(lead + (config.heads, config.head_dim))
    b_prime = xbc[..., cs["B"]].reshape(gshape)
    c_prime = xbc[..., cs["C"]].reshape(gshape)
    if state_keep is not None:
        keep = np.asarray(state_keep, dtype=bool)
        if keep.shape != (config.groups, config.state_dim):
            raise DimensionError(f"state_keep must be {(config.groups, config.state_dim)}")
        b_prime = np.where(keep, b_prime, 0.0).astype(b_prime.dtype)
        c_prime = np.where(keep, c_prime, 0.0).astype(c_prime.dtype)
    delta = softplus(delta_raw)
    b_heads = np.repeat(b_prime, config.heads_per_group, axis=-2)
    a_bar, b_bar = discretize(delta, layer.A_log, b_heads)
    return BlockSignals(z, x_prime, b_prime, c_prime, delta, a_bar, b_bar)


def block_forward(u: np.ndarray, layer: LayerWeights, config: ModelConfig, capture: bool = False,
                  observer: Optional[StepObserver] = None,
                  state_keep: Optional[np.ndarray] = None):
    """One Mamba2 block with residual: returns ``(out, capture_or_None)``."""
    u = np.asarray(u)
    if not np.isfinite(u).all():
        raise NumericError("block_forward: non-finite input")
    sig = block_signals(u, layer, config, state_keep)
    y_ssm, _, cap = ssm_scan(sig.x_prime, sig.b_bar, sig.a_bar, sig.c_prime, layer.D,
                             capture=capture, observer=observer)
    y_flat = y_ssm.reshape(y_ssm.shape[:-2] + (config.expanded_dim,))
    gated = rmsnorm(y_flat * silu(sig.z), layer.out_norm_gamma, config.eps)
    out = u + (gated @ layer.W_out.T + layer.b_out)
    return out, cap


# ---------------------------------------------------------------------------
# whole model

def as_token_batch(tokens, vocab: int) -> np.ndarray:
    """Validate and coerce tokens to a ``(B, L)`` int64 array."""
    if isinstance(tokens, np.ndarray):
        arr = tokens
    else:
        seqs = [list(s) for s in tokens] if len(tokens) and np.ndim(tokens[0]) else [list(tokens)]
        if len({len(s) for s in seqs}) > 1:
            raise DimensionError("ragged token batch: all sequences must share one length")
        arr = np.asarray(seqs)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise DimensionError(f"tokens must be (B, L) with L >= 1, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DimensionError("tokens must be integers")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        raise ParameterError(f"token ids must lie in [0, {vocab})")
    return arr.astype(np.int64, copy=False)


def embed(tokens, weights: ModelWeights) -> np.ndarray:
    return weights.embedding[as_token_batch(tokens, weights.config.vocab)]


def lm_head(hidden: np.ndarray, weights: ModelWeights) -> np.ndarray:
    normed = rmsnorm(hidden, weights.final_norm_gamma, weights.config.eps)
    return normed @ weights.embedding.T


def model_forward(tokens, weights: ModelWeights, capture_layer: Optional[int] = None,
                  state_keep: Optional[Sequence[Optional[np.ndarray]]] = None):
    """Embed, run every block, final-norm and project onto the tied head.

    Returns ``(logits, capture)``; ``capture`` is the named layer's
    TransientCapture or None.  ``state_keep`` optionally gives a per-layer
    (G, N) keep array applied directly to B'/C' (see block_signals).
    """
    cfg = weights.config
    if capture_layer is not None and not 0 <= capture_layer < cfg.n_layers:
        raise ParameterError(f"capture_layer {capture_layer} outside [0, {cfg.n_layers})")
    h = embed(tokens, weights)
    cap = None
    for j, layer in enumerate(weights.layers):
        keep = None if state_keep is None else state_keep[j]
        h, c = block_forward(h, layer, cfg, capture=(j == capture_layer), state_keep=keep)
        if j == capture_layer:
            cap = c
    return lm_head(h, weights), cap


def layer_inputs(tokens, weights: ModelWeights, layer: int) -> np.ndarray:
    """Residual-stream input of ``layer`` under the (unmasked) model."""
    h = embed(tokens, weights)
    for lw in weights.layers[:layer]:
        h, _ = block_forward(h, lw, weights.config)
    return h


def state_memory_bytes(config: ModelConfig, bytes_per_scalar: int = 4) -> tuple[int, int]:
    """Recurrent-state footprint per token: ``(per_layer, total)`` in bytes."""
    if bytes_per_scalar not in (2, 4, 8):
        raise ParameterError("bytes_per_scalar must be 2, 4 or 8")
    per_layer = config.heads * config.head_dim * config.state_dim * bytes_per_scalar
    return per_layer, per_layer * config.n_layers
