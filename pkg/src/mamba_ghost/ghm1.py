"""GHM1 model file: magic, length-prefixed JSON header, raw float32 blobs.

Layout::

    b"GHM1"
    uint32 little-endian header length
    UTF-8 JSON {"config": {...}, "tensors": [{"name", "shape", "offset"}, ...]}
    float32 little-endian blobs in directory order (offsets relative to blob start)

The header is written with sorted keys and no whitespace so identical weights
always serialise to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, NumericError
from .model import LayerWeights, ModelConfig, ModelWeights, layer_shapes

MAGIC = b"GHM1"
_F32 = np.dtype("<f4")


def _tensor_order(config: ModelConfig) -> list[tuple[str, tuple]]:
    order = [("embedding", (config.vocab, config.model_dim)),
             ("final_norm_gamma", (config.model_dim,))]
    shapes = layer_shapes(config)
    for j in range(config.n_layers):
        order.extend((f"layers.{j}.{name}", shape) for name, shape in shapes.items())
    return order


def _lookup(weights: ModelWeights, name: str) -> np.ndarray:
    if name.startswith("layers."):
        _, j, field = name.split(".", 2)
        return getattr(weights.layers[int(j)], field)
    return getattr(weights, name)


def to_bytes(weights: ModelWeights) -> bytes:
    weights.validate()
    directory, blobs, offset = [], [], 0
    for name, shape in _tensor_order(weights.config):
        arr = np.ascontiguousarray(_lookup(weights, name), dtype=_F32)
        if not np.isfinite(arr).all():
            raise NumericError(f"{name} is not finite after float32 conversion")
        directory.append({"name": name, "shape": list(shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": weights.config.to_dict(), "tensors": directory},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def from_bytes(data: bytes) -> ModelWeights:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not a GHM1 file (bad magic)")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise FormatError("truncated header")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        directory = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    blob = memoryview(data)[8 + hlen:]
    expected = _tensor_order(config)
    if [d.get("name") for d in directory] != [n for n, _ in expected]:
        raise FormatError("tensor directory does not match the config")
    tensors, cursor = {}, 0
    for entry, (name, shape) in zip(directory, expected):
        if tuple(entry["shape"]) != shape:
            raise FormatError(f"{name}: shape {entry['shape']} != expected {list(shape)}")
        if entry["offset"] != cursor:
            raise FormatError(f"{name}: offset {entry['offset']} != expected {cursor}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        if cursor + nbytes > len(blob):
            raise FormatError(f"{name}: blob truncated")
        arr = np.frombuffer(blob[cursor:cursor + nbytes], dtype=_F32).reshape(shape).astype(np.float32)
        if not np.isfinite(arr).all():
            raise FormatError(f"{name}: non-finite values")
        tensors[name] = arr
        cursor += nbytes
    if cursor != len(blob):
        raise FormatError(f"{len(blob) - cursor} trailing bytes after last tensor")
    fields = list(layer_shapes(config))
    layers = [LayerWeights(**{f: tensors[f"layers.{j}.{f}"] for f in fields})
              for j in range(config.n_layers)]
    weights = ModelWeights(config, tensors["embedding"], layers, tensors["final_norm_gamma"])
    weights.validate()
    return weights


def save(weights: ModelWeights, path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_bytes(weights))


def load(path: Union[str, Path], dtype=np.float32) -> ModelWeights:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read model file {path}: {exc}") from None
    weights = from_bytes(data)
    return weights if dtype == np.float32 else weights.astype(dtype)
