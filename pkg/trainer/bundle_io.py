"""Writers for the merging engine's on-disk formats.

Implemented against the documented contracts (bundle directory and
checkpoint container) without importing the engine, so the formats stay
an honest interface between the two packages.

Bundle directory: manifest.json plus edges.bin (little-endian u32
src,dst pairs sorted by destination then source), features.bin (f32),
labels.bin (u16) and masks.bin (u8), the last three prefixed with an
8-byte (rows, cols) u32 header. Checkpoints: model.json manifest with
tensor offsets into a concatenated little-endian float32 tensors.bin.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MASK_NAMES = ("train", "val", "test")
_DIMS = struct.Struct("<II")


def _write_array(path: Path, arr: np.ndarray, dtype: str) -> None:
    a = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    with open(path, "wb") as fh:
        fh.write(_DIMS.pack(a.shape[0], a.shape[1]))
        fh.write(a.tobytes())


def write_bundle(out_dir: str | Path, edges: np.ndarray, features: np.ndarray,
                 labels: np.ndarray, masks: dict[str, np.ndarray],
                 num_classes: int) -> Path:
    """Write a graph bundle in the engine's canonical form."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    order = np.lexsort((pairs[:, 0], pairs[:, 1]))
    pairs = pairs[order].astype("<u4")
    (out / "edges.bin").write_bytes(pairs.tobytes())
    _write_array(out / "features.bin", features, "float32")
    _write_array(out / "labels.bin", labels.reshape(-1, 1), "uint16")
    mask_mat = np.stack([masks[m] for m in MASK_NAMES], axis=1).astype(np.uint8)
    _write_array(out / "masks.bin", mask_mat, "uint8")
    manifest = {
        "num_nodes": int(features.shape[0]),
        "num_classes": int(num_classes),
        "feature_dim": int(features.shape[1]),
        "mask_names": list(MASK_NAMES),
        "files": {
            "edges": "edges.bin",
            "features": "features.bin",
            "labels": "labels.bin",
            "masks": "masks.bin",
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_bundle(path: str | Path):
    """Minimal reader for training: returns a dict of arrays."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    raw = (root / manifest["files"]["edges"]).read_bytes()
    edges = np.frombuffer(raw, dtype="<u4").reshape(-1, 2).astype(np.int64)

    def read_arr(name, dtype):
        data = (root / manifest["files"][name]).read_bytes()
        rows, cols = _DIMS.unpack_from(data)
        return (np.frombuffer(data, dtype=np.dtype(dtype).newbyteorder("<"),
                              offset=_DIMS.size)
                .reshape(rows, cols).astype(dtype))

    features = read_arr("features", "float32")
    labels = read_arr("labels", "uint16").reshape(-1).astype(np.int64)
    mask_mat = read_arr("masks", "uint8")
    masks = {name: mask_mat[:, i].astype(bool)
             for i, name in enumerate(manifest.get("mask_names", MASK_NAMES))}
    return {
        "num_nodes": int(manifest["num_nodes"]),
        "num_classes": int(manifest["num_classes"]),
        "edges": edges,
        "features": features,
        "labels": labels,
        "masks": masks,
    }


def load_split_masks(path: str | Path, num_nodes: int) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    out = {}
    for key in ("a_train", "b_train", "a_eval", "b_eval"):
        m = np.zeros(num_nodes, dtype=bool)
        m[np.asarray(doc["masks"][key], dtype=np.int64)] = True
        out[key] = m
    return out


class CheckpointWriter:
    """Engine-format checkpoint container writer."""

    def __init__(self, arch: str, activation: str):
        self.arch = arch
        self.activation = activation
        self.layers: list[dict] = []
        self._tensors: list[dict] = []
        self._chunks: list[bytes] = []
        self._offset = 0

    def add_tensor(self, name: str, arr: np.ndarray) -> None:
        a = np.ascontiguousarray(arr, dtype="<f4")
        self._tensors.append({"name": name, "shape": list(a.shape),
                              "offset": self._offset})
        data = a.tobytes()
        self._chunks.append(data)
        self._offset += len(data)

    def add_layer(self, spec: dict) -> None:
        self.layers.append(spec)

    def save(self, out_dir: str | Path, config: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": 1,
            "arch": self.arch,
            "activation": self.activation,
            "layers": self.layers,
            "tensors": self._tensors,
        }
        if config is not None:
            manifest["config"] = config
        with open(out / "tensors.bin", "wb") as fh:
            for chunk in self._chunks:
                fh.write(chunk)
        (out / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return out
