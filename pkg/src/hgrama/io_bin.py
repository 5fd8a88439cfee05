"""Little-endian binary file helpers for bundle and checkpoint payloads.

Array files carry an 8-byte dims header (two u32: rows, cols) followed by
row-major data. Checkpoint tensors are packed back to back in a single
``tensors.bin``; byte offsets live in the JSON manifest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

_DIMS = struct.Struct("<II")


def write_dims_array(path: Path, arr: np.ndarray, dtype: str) -> None:
    """Write a 2-D array with the 8-byte (rows, cols) header."""
    a = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValidationError(f"{path.name}: expected 1-D or 2-D array, got ndim={arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(_DIMS.pack(a.shape[0], a.shape[1]))
        fh.write(a.tobytes())


def read_dims_array(path: Path, dtype: str) -> np.ndarray:
    """Read an array written by :func:`write_dims_array`."""
    raw = path.read_bytes()
    if len(raw) < _DIMS.size:
        raise ValidationError(f"{path.name}: truncated header")
    rows, cols = _DIMS.unpack_from(raw)
    dt = np.dtype(dtype).newbyteorder("<")
    expect = _DIMS.size + rows * cols * dt.itemsize
    if len(raw) != expect:
        raise ValidationError(
            f"{path.name}: payload is {len(raw)} bytes, header implies {expect}"
        )
    return np.frombuffer(raw, dtype=dt, offset=_DIMS.size).reshape(rows, cols).astype(dtype)


class TensorWriter:
    """Packs named float32 tensors into one blob, recording manifest entries."""

    def __init__(self) -> None:
        self._chunks: list[bytes] = []
        self._entries: list[dict] = []
        self._offset = 0

    def add(self, name: str, arr: np.ndarray) -> None:
        a = np.ascontiguousarray(arr, dtype="<f4")
        data = a.tobytes()
        self._entries.append(
            {"name": name, "shape": list(a.shape), "offset": self._offset}
        )
        self._chunks.append(data)
        self._offset += len(data)

    @property
    def entries(self) -> list[dict]:
        return self._entries

    def dump(self, path: Path) -> None:
        with open(path, "wb") as fh:
            for chunk in self._chunks:
                fh.write(chunk)


class TensorReader:
    """Random access into a ``tensors.bin`` blob via manifest entries."""

    def __init__(self, path: Path, entries: list[dict]):
        self._raw = path.read_bytes()
        self._index = {e["name"]: e for e in entries}

    def get(self, name: str) -> np.ndarray:
        if name not in self._index:
            raise ValidationError(f"tensor {name!r} missing from checkpoint blob")
        e = self._index[name]
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        end = start + 4 * n
        if end > len(self._raw):
            raise ValidationError(f"tensor {name!r} overruns blob ({end} > {len(self._raw)})")
        return (
            np.frombuffer(self._raw, dtype="<f4", count=n, offset=start)
            .reshape(shape)
            .astype(np.float32)
        )

    def names(self) -> set[str]:
        return set(self._index)
