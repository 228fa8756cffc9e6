"""Named parameter tables and the checkpoint file format.

Checkpoints are a simple self-describing binary: a versioned magic line,
a JSON metadata blob, then each array as (name, dtype, shape, raw
little-endian bytes) sorted by name. Writing is fully deterministic and
values round-trip byte-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ndtensor import Rng, Tensor

_MAGIC = b"SLOTGROUND-CKPT v1\n"
_DTYPES = {"float64": "<f8", "uint8": "u1", "int64": "<i8"}


class ParamStore(dict):
    """name -> Tensor mapping with deterministic iteration helpers."""

    def add(self, name: str, array) -> Tensor:
        if name in self:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(array)
        self[name] = t
        return t

    def names(self) -> list[str]:
        return sorted(self.keys())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self[k].value for k in self.names()}

    def zero_grads(self) -> None:
        for t in self.values():
            t.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self) - set(arrays)
        extra = set(arrays) - set(self)
        if missing or extra:
            raise KeyError(f"parameter table mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for k, v in arrays.items():
            if self[k].value.shape != v.shape:
                raise ValueError(f"parameter {k!r} shape {v.shape} != expected {self[k].value.shape}")
            self[k].value = np.asarray(v, dtype=np.float64)


def glorot(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape or (fan_in, fan_out), -limit, limit)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(f"{len(meta_bytes)}\n".encode())
        fh.write(meta_bytes)
        fh.write(f"\n{len(arrays)}\n".encode())
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype == np.float64:
                dtype = "float64"
            elif arr.dtype == np.uint8:
                dtype = "uint8"
            elif arr.dtype == np.int64:
                dtype = "int64"
            else:
                raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name}\n{dtype}\n{dims}\n".encode())
            fh.write(arr.astype(_DTYPES[dtype]).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path} is not a slotground checkpoint")
        meta_len = int(fh.readline())
        meta = json.loads(fh.read(meta_len).decode())
        fh.readline()  # newline after the meta blob
        count = int(fh.readline())
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = fh.readline().decode().rstrip("\n")
            dtype = fh.readline().decode().strip()
            dims_line = fh.readline().decode().split()
            shape = tuple(int(d) for d in dims_line)
            n_items = int(np.prod(shape)) if shape else 1
            raw = fh.read(n_items * np.dtype(_DTYPES[dtype]).itemsize)
            arrays[name] = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape).copy()
    return arrays, meta
