"""Dataset acquisition: Planetoid raw files or deterministic surrogates.

The citation networks load from their standard raw pickle files
(ind.<name>.x / tx / allx / y / ty / ally / graph / test.index) when a
local copy exists; this sandbox has no network, so `synth-cora`
generates a Cora-scale homophilic stand-in (stochastic block model,
bag-of-words-style class prototypes, planetoid-style masks) that
exercises the same pipeline end to end.
"""

from __future__ import annotations

import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PLANETOID_NAMES = ("cora", "citeseer", "pubmed")


def _parse_index_file(path: Path) -> np.ndarray:
    return np.array([int(line) for line in path.read_text().split()], dtype=np.int64)


def load_planetoid(name: str, root: str | Path):
    """Standard Planetoid raw-file loader (x/tx/allx pickled CSR parts)."""
    root = Path(root)
    objs = {}
    for suffix in ("x", "tx", "allx", "y", "ty", "ally", "graph"):
        path = root / f"ind.{name}.{suffix}"
        if not path.exists():
            raise FileNotFoundError(f"missing raw file {path}")
        with open(path, "rb") as fh:
            objs[suffix] = pickle.load(fh, encoding="latin1")
    test_idx = _parse_index_file(root / f"ind.{name}.test.index")
    test_sorted = np.sort(test_idx)

    allx, tx = objs["allx"], objs["tx"]
    ally, ty = objs["ally"], objs["ty"]
    if name == "citeseer":
        # citeseer has isolated test nodes missing from tx; pad them
        full = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_ext = sp.lil_matrix((len(full), tx.shape[1]), dtype=np.float32)
        tx_ext[test_sorted - test_sorted.min()] = tx
        tx = tx_ext.tocsr()
        ty_ext = np.zeros((len(full), ty.shape[1]), dtype=ty.dtype)
        ty_ext[test_sorted - test_sorted.min()] = ty
        ty = ty_ext

    features = sp.vstack([allx, tx]).tolil()
    features[test_idx] = features[test_sorted]
    labels_onehot = np.vstack([ally, ty])
    labels_onehot[test_idx] = labels_onehot[test_sorted]
    labels = labels_onehot.argmax(axis=1).astype(np.int64)

    n = features.shape[0]
    edges = []
    for u, nbrs in objs["graph"].items():
        for v in nbrs:
            if u < n and v < n:
                edges.append((u, v))
                edges.append((v, u))
    edges = np.unique(np.asarray(edges, dtype=np.int64), axis=0)
    edges = edges[edges[:, 0] != edges[:, 1]]

    train = np.zeros(n, bool)
    val = np.zeros(n, bool)
    test = np.zeros(n, bool)
    train[: objs["y"].shape[0]] = True
    val[objs["y"].shape[0]: objs["y"].shape[0] + 500] = True
    test[test_sorted] = True
    return {
        "edges": edges,
        "features": np.asarray(features.todense(), dtype=np.float32),
        "labels": labels,
        "masks": {"train": train, "val": val, "test": test},
        "num_classes": int(labels_onehot.shape[1]),
    }


def synth_planetoid(num_nodes=2708, num_classes=7, feature_dim=1433,
                    avg_degree=4.0, train_per_class=20, num_val=500,
                    num_test=1000, homophily=0.82, seed=0):
    """Cora-scale homophilic surrogate with planetoid-style masks.

    Each class owns a sparse binary prototype; node features flip a few
    prototype bits and add background noise. Edges follow a two-block
    rate (within-class vs cross-class) tuned to the target mean degree.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=num_nodes)

    proto_bits = min(40, max(4, feature_dim // 8))
    noise_bits = min(12, max(2, feature_dim // 24))
    protos = np.zeros((num_classes, feature_dim), dtype=np.float32)
    for c in range(num_classes):
        protos[c, rng.choice(feature_dim, proto_bits, replace=False)] = 1.0
    features = np.zeros((num_nodes, feature_dim), dtype=np.float32)
    for v in range(num_nodes):
        f = protos[labels[v]].copy()
        drop = rng.random(feature_dim) < 0.35
        f[drop] = 0.0
        f[rng.choice(feature_dim, noise_bits, replace=False)] = 1.0
        features[v] = f
    row_norm = np.maximum(features.sum(axis=1, keepdims=True), 1.0)
    features /= row_norm

    # undirected homophilic edges via within/cross class sampling
    m_total = int(avg_degree * num_nodes / 2)
    m_in = int(homophily * m_total)
    edges = set()
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    while len(edges) < 2 * m_in:
        c = int(rng.integers(0, num_classes))
        pool = by_class[c]
        if len(pool) < 2:
            continue
        u, v = rng.choice(pool, 2, replace=False)
        if u != v:
            edges.add((int(u), int(v)))
            edges.add((int(v), int(u)))
    while len(edges) < 2 * m_total:
        u, v = rng.integers(0, num_nodes, 2)
        if u != v:
            edges.add((int(u), int(v)))
            edges.add((int(v), int(u)))
    edges = np.asarray(sorted(edges), dtype=np.int64)

    train = np.zeros(num_nodes, bool)
    for c in range(num_classes):
        nodes = by_class[c]
        take = min(train_per_class, len(nodes))
        train[rng.choice(nodes, take, replace=False)] = True
    rest = np.flatnonzero(~train)
    rest = rest[rng.permutation(len(rest))]
    val = np.zeros(num_nodes, bool)
    test = np.zeros(num_nodes, bool)
    val[rest[:num_val]] = True
    test[rest[num_val:num_val + num_test]] = True
    return {
        "edges": edges,
        "features": features,
        "labels": labels,
        "masks": {"train": train, "val": val, "test": test},
        "num_classes": num_classes,
    }


def obtain(dataset: str, data_root: str | None = None, seed: int = 0):
    """Resolve a dataset name to arrays, preferring real raw files."""
    if dataset in PLANETOID_NAMES:
        if data_root is None:
            raise FileNotFoundError(
                f"{dataset} needs --data-root pointing at the raw Planetoid files "
                "(no network access in this environment); use synth-cora for the "
                "built-in surrogate"
            )
        return load_planetoid(dataset, data_root)
    if dataset == "synth-cora":
        return synth_planetoid(seed=seed)
    if dataset.startswith("synth:"):
        # synth:N,K,D e.g. synth:500,4,32
        n, k, d = (int(tok) for tok in dataset.split(":")[1].split(","))
        return synth_planetoid(num_nodes=n, num_classes=k, feature_dim=d,
                               train_per_class=max(5, n // (k * 10)),
                               num_val=n // 5, num_test=n // 3, seed=seed)
    raise ValueError(f"unknown dataset {dataset!r}")
