"""Shared generators: random bundles and random parent models."""

from __future__ import annotations

import numpy as np
import pytest

from hgrama.graph_store import GraphBundle
from hgrama.model_zoo import (
    GATLayer,
    GCNLayer,
    GINLayer,
    ParentModel,
    SAGELayer,
    DEFAULT_ACTIVATION,
)


def make_bundle(edges, num_nodes, features, labels=None, num_classes=None,
                train=None, val=None, test=None) -> GraphBundle:
    """Build a bundle from an explicit (src, dst) edge list."""
    pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    order = np.lexsort((pairs[:, 0], pairs[:, 1])) if len(pairs) else np.empty(0, dtype=np.int64)
    pairs = pairs[order]
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    if len(pairs):
        np.add.at(indptr, pairs[:, 1] + 1, 1)
    indptr = np.cumsum(indptr)
    features = np.asarray(features, dtype=np.float32)
    if labels is None:
        labels = np.zeros(num_nodes, dtype=np.int64)
    if num_classes is None:
        num_classes = max(int(np.max(labels)) + 1, 2)
    masks = {
        "train": np.zeros(num_nodes, dtype=bool) if train is None else np.asarray(train, bool),
        "val": np.zeros(num_nodes, dtype=bool) if val is None else np.asarray(val, bool),
        "test": np.zeros(num_nodes, dtype=bool) if test is None else np.asarray(test, bool),
    }
    return GraphBundle(
        num_nodes=num_nodes,
        num_classes=num_classes,
        indptr=indptr,
        sources=pairs[:, 0].copy() if len(pairs) else np.empty(0, dtype=np.int64),
        features=features,
        labels=np.asarray(labels, dtype=np.int64),
        masks=masks,
    )


def random_bundle(n=30, d0=8, k=3, avg_deg=4.0, seed=0, symmetric=True) -> GraphBundle:
    """Random graph with gaussian features and planetoid-style masks."""
    rng = np.random.default_rng(seed)
    m = int(avg_deg * n / (2 if symmetric else 1))
    src = rng.integers(0, n, size=m)
    dst = rng.integers(0, n, size=m)
    keep = src != dst
    pairs = np.stack([src[keep], dst[keep]], axis=1)
    if symmetric:
        pairs = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    pairs = np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)
    feats = rng.standard_normal((n, d0)).astype(np.float32)
    labels = rng.integers(0, k, size=n)
    perm = rng.permutation(n)
    n_train = max(k, n // 3)
    n_test = max(1, n // 3)
    train = np.zeros(n, bool)
    test = np.zeros(n, bool)
    train[perm[:n_train]] = True
    test[perm[n_train:n_train + n_test]] = True
    val = ~(train | test)
    return make_bundle(pairs, n, feats, labels=labels, num_classes=k,
                       train=train, val=val, test=test)


def _glorot(rng, shape):
    fan = shape[-2] + shape[-1]
    scale = np.sqrt(6.0 / fan)
    return rng.uniform(-scale, scale, size=shape).astype(np.float32)


def random_model(arch: str, dims: list[int], seed: int = 0, heads: int = 4,
                 leaky_slope: float = 0.2) -> ParentModel:
    """Random parent with the given width chain [d0, h1, ..., K]."""
    import zlib

    rng = np.random.default_rng([seed, zlib.crc32(arch.encode())])
    layers = []
    for i in range(len(dims) - 1):
        d_in, d_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        if arch == "gcn":
            layers.append(GCNLayer(W=_glorot(rng, (d_in, d_out)),
                                   b=np.zeros(d_out, np.float32)))
        elif arch == "sage":
            layers.append(SAGELayer(W_root=_glorot(rng, (d_in, d_out)),
                                    W_neigh=_glorot(rng, (d_in, d_out)),
                                    b=np.zeros(d_out, np.float32)))
        elif arch == "gat":
            concat = not last
            d_head = d_out // heads if concat else d_out
            if concat and d_out % heads:
                raise ValueError("hidden width must divide heads")
            layers.append(GATLayer(
                W=_glorot(rng, (heads, d_in, d_head)),
                a_src=_glorot(rng, (heads, d_head)),
                a_dst=_glorot(rng, (heads, d_head)),
                b=np.zeros(d_out, np.float32),
                concat=concat,
                leaky_slope=leaky_slope,
            ))
        elif arch == "gin":
            eps = float(rng.uniform(-0.2, 0.4))
            mlp = [(_glorot(rng, (d_in, d_out)), np.zeros(d_out, np.float32)),
                   (_glorot(rng, (d_out, d_out)), np.zeros(d_out, np.float32))]
            layers.append(GINLayer(eps_gin=eps, mlp=mlp))
        else:
            raise ValueError(arch)
    model = ParentModel(arch=arch, layers=layers, activation=DEFAULT_ACTIVATION[arch])
    model.validate()
    return model


@pytest.fixture
def small_bundle():
    return random_bundle(n=24, d0=6, k=3, seed=7)
