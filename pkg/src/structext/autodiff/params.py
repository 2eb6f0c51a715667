"""Named trainable parameters and the checkpoint format.

A checkpoint is a directory holding ``manifest.json`` (name, shape, dtype and
byte offset per entry, ``format_version: 1``) and ``params.bin``, the
concatenation of little-endian raw arrays in manifest order.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from .tensor import Tensor, get_dtype

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoints."""


class ParameterStore:
    """Ordered map ``name -> Tensor`` with a seeded generator for initialisation."""

    def __init__(self, seed: int = 0):
        self.rng_seed = int(seed)
        self.rng = np.random.default_rng(self.rng_seed)
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.entries:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(value, requires_grad=True, name=name)
        self.entries[name] = t
        return t

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self.add(name, self.rng.normal(0.0, std, size=shape).astype(get_dtype()))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape, dtype=get_dtype()))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape, dtype=get_dtype()))

    def glorot(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        shape = shape or (fan_in, fan_out)
        return self.add(name, self.rng.uniform(-limit, limit, size=shape).astype(get_dtype()))

    def custom(self, name: str, init: Callable[[np.random.Generator], np.ndarray]) -> Tensor:
        return self.add(name, np.asarray(init(self.rng), dtype=get_dtype()))

    def set_value(self, name: str, value: np.ndarray) -> None:
        old = self.entries[name]
        value = np.asarray(value, dtype=old.dtype)
        if value.shape != old.shape:
            raise CheckpointError(f"parameter {name!r}: shape {value.shape} != expected {old.shape}")
        value = value.copy()
        value.flags.writeable = False
        old.value = value

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.value.size for t in self.entries.values()))

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.value) for k, t in self.entries.items())


def save_checkpoint(store: ParameterStore, directory, meta: Optional[dict] = None, skip_prefixes=()) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / BLOB, "wb") as fh:
        for name, t in store.items():
            if name.startswith(tuple(skip_prefixes)):
                continue
            arr = np.ascontiguousarray(t.value)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes(order="C")
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset})
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "rng_seed": store.rng_seed,
        "entries": entries,
        "meta": meta or {},
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def read_checkpoint(directory) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
        blob = (directory / BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {directory}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {manifest.get('format_version')!r}")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for e in manifest["entries"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return manifest, arrays


def load_into(store: ParameterStore, directory, strict: bool = True, skip_prefixes=()) -> list[str]:
    """Copy checkpoint values into ``store``; returns names left at their fresh initialisation.

    With ``strict=False`` parameters missing from the checkpoint (e.g. new task
    heads) keep their initial values; checkpoint entries unknown to the store are
    ignored.  Shape mismatches always raise.
    """
    _, arrays = read_checkpoint(directory)
    fresh = []
    for name in store:
        if name in arrays and not name.startswith(tuple(skip_prefixes)):
            store.set_value(name, arrays[name])
        elif strict:
            raise CheckpointError(f"checkpoint at {directory} has no parameter {name!r}")
        else:
            fresh.append(name)
    return fresh
