"""Dense-vs-pruned divergence metrics over an evaluation token set."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericError, ParameterError
from .model import ModelWeights, as_token_batch, model_forward

# float64 round-off on identical distributions stays far below this
_KL_NEGATIVE_SLACK = 1e-10


@dataclass
class DivergenceReport:
    mse: float          # mean squared logit difference
    kl: float           # mean KL(dense || pruned) per position
    ce_delta: float     # next-byte cross-entropy, pruned minus dense
    positions: int

    def to_dict(self) -> dict:
        return asdict(self)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def divergence(dense: ModelWeights, pruned: ModelWeights, eval_tokens) -> DivergenceReport:
    if dense.config != pruned.config:
        raise ParameterError("divergence: dense and pruned configs differ")
    tokens = as_token_batch(eval_tokens, dense.config.vocab)
    ld, _ = model_forward(tokens, dense)
    lp, _ = model_forward(tokens, pruned)
    ld, lp = ld.astype(np.float64), lp.astype(np.float64)
    mse = float(np.mean((ld - lp) ** 2))
    logp_d, logp_p = log_softmax(ld), log_softmax(lp)
    kl_pos = (np.exp(logp_d) * (logp_d - logp_p)).sum(axis=-1)
    kl = float(kl_pos.mean())
    if kl < -_KL_NEGATIVE_SLACK or not np.isfinite(kl):
        raise NumericError(f"KL divergence came out negative or non-finite ({kl})")
    kl = max(kl, 0.0)
    if tokens.shape[1] > 1:
        nxt = tokens[:, 1:, None]
        ce_d = -np.take_along_axis(logp_d[:, :-1], nxt, axis=-1).mean()
        ce_p = -np.take_along_axis(logp_p[:, :-1], nxt, axis=-1).mean()
        ce_delta = float(ce_p - ce_d)
    else:
        ce_delta = 0.0
    return DivergenceReport(mse, kl, ce_delta, int(tokens.size))
