"""CSV and JSON writers: score tables, channel-loss tables, masks and reports.

CSVs use a header row, '.' decimals, '\\n' line endings and ``repr`` floats so
identical inputs produce identical bytes on every platform.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError
from .model import ModelConfig
from .scorer import PruneMask, SaliencyTable, prune_order

SCORE_COLUMNS = ["layer", "group", "channel", "raw_sum", "score", "rank", "kept"]
LOSS_COLUMNS = ["layer", "group", "channel", "bruteforce", "predicted", "rel_err"]


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


def score_rows(tables: Sequence[SaliencyTable], keeps: Sequence[np.ndarray],
               method: Optional[str] = None) -> list[list]:
    """One row per (layer, group, channel).

    ``rank`` is the position in pruning order (0 = first to be pruned).
    """
    rows = []
    for table, keep in zip(tables, keeps):
        G, N = table.raw.shape
        rank = np.empty(G * N, dtype=np.int64)
        rank[prune_order(table.raw)] = np.arange(G * N)
        for g in range(G):
            for i in range(N):
                row = [table.layer, g, i, table.raw[g, i], table.scores[g, i],
                       rank[g * N + i], bool(keep[g, i])]
                if method is not None:
                    row.append(method)
                rows.append(row)
    return rows


def write_score_csv(path, tables, keeps, method: Optional[str] = None) -> str:
    """Score export; data-free baselines append a ``method`` column."""
    header = SCORE_COLUMNS + (["method"] if method is not None else [])
    return _write_csv(path, header, score_rows(tables, keeps, method))


def write_channel_loss_csv(path, rows: Iterable[Sequence]) -> str:
    return _write_csv(path, LOSS_COLUMNS, rows)


def _json_float(v: float):
    if math.isnan(v):
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


def _parse_float(v) -> float:
    return math.nan if v is None else float(v)


def mask_to_dict(mask: PruneMask, config: ModelConfig) -> dict:
    return {
        "format": "ghost-mask/1",
        "config_fingerprint": config.fingerprint(),
        "method": mask.method,
        "kappa": mask.kappa,
        "seed": mask.seed,
        "shape": list(mask.keep.shape),
        "layers": [{"layer": j, "pruned": [list(p) for p in mask.pruned_pairs(j)],
                    "tau": _json_float(mask.thresholds[j]) if j < len(mask.thresholds) else None}
                   for j in range(mask.n_layers)],
    }


def dumps(obj, indent: Optional[int] = 1) -> str:
    return json.dumps(obj, sort_keys=True, indent=indent, allow_nan=False) + "\n"


def save_mask(path, mask: PruneMask, config: ModelConfig) -> None:
    Path(path).write_text(dumps(mask_to_dict(mask, config), indent=None), encoding="utf-8", newline="")


def mask_from_dict(data: dict, config: Optional[ModelConfig] = None) -> PruneMask:
    try:
        if config is not None and data["config_fingerprint"] != config.fingerprint():
            raise FormatError("mask was built for a different model configuration")
        layers, G, N = data["shape"]
        keep = np.ones((layers, G, N), dtype=bool)
        thresholds = []
        for entry in data["layers"]:
            for g, i in entry["pruned"]:
                keep[entry["layer"], g, i] = False
            thresholds.append(_parse_float(entry["tau"]))
        return PruneMask(keep, float(data["kappa"]), data["method"], data["seed"], thresholds)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed mask file: {exc}") from None


def load_mask(path, config: Optional[ModelConfig] = None) -> PruneMask:
    return mask_from_dict(json.loads(Path(path).read_text(encoding="utf-8")), config)
