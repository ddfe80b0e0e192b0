"""Single-file checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then every parameter as little-endian float64 in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LocationTable
from .model import ModelConfig
from .tensor import Tensor
from .text import Vocabulary

MAGIC = b"MRLFCKP1"


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the dataset."""


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    model_config: ModelConfig
    vocab: Vocabulary
    locations: LocationTable
    header: dict

    @property
    def config_hash(self) -> str:
        return self.header["config_hash"]


def save_checkpoint(path, params: dict, model_config: ModelConfig, vocab: Vocabulary,
                    locations: LocationTable, train_config: dict | None = None) -> Path:
    entries, offset = [], 0
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    header = {
        "format": 1,
        "config_hash": model_config.config_hash(),
        "model_config": model_config.to_dict(),
        "component_offsets": {k: list(v) for k, v in model_config.offsets.items()},
        "train_config": train_config or {},
        "vocab": vocab.to_dict(),
        "locations": locations.to_list(),
        "params": entries,
    }
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an MRLF checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    data = memoryview(raw)[16 + n:]
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(data[e["offset"]:e["offset"] + 8 * count], dtype="<f8")
        if arr.size != count:
            raise CheckpointError(f"{path}: truncated parameter {e['name']}")
        params[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(np.float64), requires_grad=True)
    cfg = ModelConfig(**header["model_config"])
    if cfg.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    return Checkpoint(params, cfg, Vocabulary.from_dict(header["vocab"]),
                      LocationTable.from_list(header["locations"]), header)
