"""Binary model checkpoints with a bit-exact round trip.

Layout (all integers little-endian):

    magic   8 bytes  b"FPTNCKPT"
    version u16      currently 1
    hlen    u64      byte length of the JSON header
    header  hlen bytes, UTF-8 JSON:
        {"config": {...}, "norm_stats": {"mean","std"} | null,
         "split_ratio": str | null, "dataset_name": str | null,
         "arrays": [{"name", "shape", "role"}, ...]}
    data    concatenated float64 little-endian C-order array bytes,
            in the order listed under "arrays"

Arrays cover every trainable parameter plus the batch-norm running
statistics (role "norm_stat"). Values round-trip exactly because the raw
float64 bytes are stored.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import NormStats
from .errors import IngestionError
from .model import ModelConfig, ModelParams

MAGIC = b"FPTNCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    norm_stats: NormStats | None = None
    split_ratio: str | None = None
    dataset_name: str | None = None

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _stat_arrays(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, (s1, s2) in enumerate(params.norm_states):
        for label, state in (("norm1", s1), ("norm2", s2)):
            if state.initialized:
                out.append((f"layers.{i}.{label}.running_mean", state.running_mean))
                out.append((f"layers.{i}.{label}.running_var", state.running_var))
    return out


def save(ckpt: Checkpoint, path) -> None:
    params = ckpt.params
    arrays = [(name, t.data) for name, t in params.tensors.items()]
    arrays += [(name, arr) for name, arr in _stat_arrays(params)]
    index = []
    for name, arr in arrays:
        role = "norm_stat" if name.endswith(("running_mean", "running_var")) else "parameter"
        index.append({"name": name, "shape": list(arr.shape), "role": role})
    header = {
        "config": params.config.to_dict(),
        "norm_stats": (None if ckpt.norm_stats is None
                       else {"mean": ckpt.norm_stats.mean, "std": ckpt.norm_stats.std}),
        "split_ratio": ckpt.split_ratio,
        "dataset_name": ckpt.dataset_name,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such checkpoint")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise IngestionError(f"{path}: bad magic {blob[:8]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", blob, 8)
    if version != VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 10)
    try:
        header = json.loads(blob[18:18 + hlen].decode())
        config = ModelConfig.from_dict(header["config"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IngestionError(f"{path}: corrupt checkpoint header: {exc}") from exc

    params = ModelParams(config, init=False)
    offset = 18 + hlen
    stats: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        arr = arr.reshape(shape).copy()
        if entry["role"] == "parameter":
            params.tensors[entry["name"]] = Tensor(arr, requires_grad=True)
        else:
            stats[entry["name"]] = arr
    for i, (s1, s2) in enumerate(params.norm_states):
        for label, state in (("norm1", s1), ("norm2", s2)):
            mean = stats.get(f"layers.{i}.{label}.running_mean")
            if mean is not None:
                state.running_mean = mean
                state.running_var = stats[f"layers.{i}.{label}.running_var"]

    norm = header.get("norm_stats")
    return Checkpoint(
        params=params,
        norm_stats=None if norm is None else NormStats(mean=norm["mean"], std=norm["std"]),
        split_ratio=header.get("split_ratio"),
        dataset_name=header.get("dataset_name"),
    )
