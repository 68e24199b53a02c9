"""Byte-level calibration/evaluation sets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CalibrationError, ParameterError


@dataclass
class CalibrationSet:
    source: str
    tokens: np.ndarray    # (samples, L) int64

    @property
    def n_samples(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


def load_text_calibration(path, seq_len: int, max_samples: Optional[int] = None,
                          vocab: int = 256) -> CalibrationSet:
    """Chunk a file's UTF-8 bytes into non-overlapping windows of ``seq_len``.

    The trailing partial window is dropped.
    """
    if seq_len < 1:
        raise ParameterError("seq_len must be >= 1")
    if vocab < 256:
        raise ParameterError("byte-level calibration needs vocab >= 256")
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CalibrationError(f"cannot read calibration file {path}: {exc}") from None
    if not raw:
        raise CalibrationError(f"calibration file {path} is empty")
    n = len(raw) // seq_len
    if n == 0:
        raise CalibrationError(f"calibration file {path} ({len(raw)} bytes) is shorter than "
                               f"seq_len={seq_len}")
    if max_samples is not None:
        if max_samples < 1:
            raise ParameterError("max_samples must be >= 1")
        n = min(n, max_samples)
    tokens = np.frombuffer(raw[:n * seq_len], dtype=np.uint8).reshape(n, seq_len).astype(np.int64)
    return CalibrationSet(str(path), tokens)


def random_tokens(n_samples: int, seq_len: int, seed: int, vocab: int = 256) -> np.ndarray:
    """Uniform random byte sequences, used when no text file is supplied."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab, size=(n_samples, seq_len), dtype=np.int64)
