"""Named parameter storage and bitwise round-tripping checkpoints."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import ShapeMismatch


class ParamStore:
    """Ordered ``key -> float64 array`` map with one gradient buffer per key.

    Iteration order is insertion order and defines the canonical flattening
    used by :meth:`flat` and :meth:`flat_grads`.
    """

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for key, val in (values or {}).items():
            self.add(key, val)

    def add(self, key: str, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {key!r} has non-finite values")
        self.values[key] = arr
        self.grads[key] = np.zeros_like(arr)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.values[key]

    def __setitem__(self, key: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if key in self.values and value.shape != self.values[key].shape:
            raise ShapeMismatch(f"{key}: {value.shape} vs {self.values[key].shape}")
        if key not in self.values:
            self.add(key, value)
        else:
            self.values[key] = value

    def __contains__(self, key) -> bool:
        return key in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def keys(self):
        return self.values.keys()

    def items(self):
        return self.values.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.values.items()})

    def zero_grad(self) -> None:
        for key, val in self.values.items():
            self.grads[key] = np.zeros_like(val)

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()]) if self.values else np.zeros(0)

    def flat_grads(self) -> np.ndarray:
        return flatten(self.grads, self.values.keys())

    def load_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for key, val in self.values.items():
            self.values[key] = np.asarray(flat[offset:offset + val.size], dtype=np.float64).reshape(val.shape).copy()
            offset += val.size
        if offset != flat.size:
            raise ShapeMismatch(f"flat vector has {flat.size} entries, store holds {offset}")

    def same_shapes(self, other: "ParamStore") -> bool:
        return list(self.keys()) == list(other.keys()) and all(
            self[k].shape == other[k].shape for k in self.keys()
        )

    def bitwise_equal(self, other: "ParamStore") -> bool:
        return self.same_shapes(other) and all(
            self[k].tobytes() == other[k].tobytes() for k in self.keys()
        )


def flatten(arrays: dict[str, np.ndarray], keys) -> np.ndarray:
    parts = [np.asarray(arrays[k], dtype=np.float64).ravel() for k in keys]
    return np.concatenate(parts) if parts else np.zeros(0)


# checkpoint layout: 8-byte magic, u64 header length, JSON header, raw '<f8' blobs
_MAGIC = b"HCCKPT01"


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> Path:
    path = Path(path)
    entries, offset = [], 0
    for key, val in store.items():
        entries.append({"key": key, "shape": list(val.shape), "offset": offset})
        offset += val.size * 8
    header = json.dumps({"meta": meta or {}, "params": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint64(len(header)).astype("<u8").tobytes())
        fh.write(header)
        for val in store.values.values():
            fh.write(np.ascontiguousarray(val, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a hypercare checkpoint")
    hlen = int(np.frombuffer(data[8:16], dtype="<u8")[0])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    store = ParamStore()
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(data[start:start + 8 * count], dtype="<f8").astype(np.float64)
        store.add(entry["key"], arr.reshape(entry["shape"]))
    return store, header["meta"]
