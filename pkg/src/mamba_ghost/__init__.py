"""Desk-scale Mamba2 inference with GHOST state-dimension pruning."""

from .model import (ModelConfig, LayerWeights, ModelWeights, TransientCapture, init_model,
                    model_forward, block_forward, ssm_scan, state_memory_bytes)
from .scorer import (SaliencyAccumulator, SaliencyTable, PruneMask, accumulate_step, finalize,
                     merge, pool_and_threshold)
from .baselines import magnitude_score, random_mask
from .pipeline import apply_mask, sequential_prune, sparsity, PruneReport
from .evaluate import divergence, DivergenceReport

__version__ = "0.1.0"
