"""Native layer semantics against dense / per-node oracles, checkpoint I/O."""

import numpy as np
import pytest

from hgrama.errors import ValidationError
from hgrama.model_zoo import (
    GATLayer,
    GCNLayer,
    GINLayer,
    ParentModel,
    SAGELayer,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from hgrama.sparse_ops import edge_destinations, leaky_relu
from conftest import make_bundle, random_bundle, random_model

ARCH_DIMS = {"gcn": [6, 16, 3], "sage": [6, 16, 3], "gat": [6, 16, 3], "gin": [6, 16, 3]}


def dense_gcn_oracle(bundle, W, b):
    """Dense D^-1/2 (A+I) D^-1/2 X W + b."""
    n = bundle.num_nodes
    A = np.zeros((n, n), dtype=np.float64)
    dst = edge_destinations(bundle.indptr)
    for u, v in zip(bundle.sources, dst):
        A[v, u] += 1.0
    A += np.eye(n)
    dinv = 1.0 / np.sqrt(A.sum(axis=1))
    norm = (dinv[:, None] * A) * dinv[None, :]
    return norm @ bundle.features.astype(np.float64) @ W.astype(np.float64) + b


def test_single_node_gcn():
    b = make_bundle([], 1, np.array([[2.0, -1.0]], np.float32))
    W = np.array([[1.0, 0.5], [0.0, 2.0]], np.float32)
    bias = np.array([0.1, 0.2], np.float32)
    model = ParentModel("gcn", [GCNLayer(W=W, b=bias)], "relu")
    tr = forward(model, b)
    expected = b.features @ W + bias   # normalization is 1 for a lone self-loop
    np.testing.assert_allclose(tr.logits, expected, atol=1e-6)


def test_gcn_matches_dense_oracle():
    for seed in range(5):
        bundle = random_bundle(n=40, d0=6, k=3, seed=seed)
        model = random_model("gcn", [6, 12], seed=seed)
        tr = forward(model, bundle)
        want = dense_gcn_oracle(bundle, model.layers[0].W, model.layers[0].b)
        np.testing.assert_allclose(tr.logits, want, atol=1e-5)


def test_sage_two_node_clique():
    b = make_bundle([(0, 1), (1, 0)], 2,
                    np.array([[1.0, 2.0], [3.0, 4.0]], np.float32))
    eye = np.eye(2, dtype=np.float32)
    model = ParentModel("sage", [SAGELayer(W_root=eye, W_neigh=eye,
                                           b=np.zeros(2, np.float32))], "relu")
    tr = forward(model, b)
    np.testing.assert_allclose(tr.logits[0], b.features[0] + b.features[1], atol=1e-6)
    np.testing.assert_allclose(tr.logits[1], b.features[1] + b.features[0], atol=1e-6)


def gat_oracle(bundle, layer):
    """Per-destination explicit softmax attention."""
    H = bundle.features.astype(np.float64)
    outs = []
    alphas = {}
    for k in range(layer.heads):
        Z = H @ layer.W[k].astype(np.float64)
        out_k = np.zeros_like(Z)
        for v in range(bundle.num_nodes):
            nb = bundle.neighbors(v)
            if len(nb) == 0:
                continue
            scores = np.array([
                leaky_relu(
                    np.float64(Z[u] @ layer.a_src[k] + Z[v] @ layer.a_dst[k]),
                    layer.leaky_slope,
                )
                for u in nb
            ])
            e = np.exp(scores - scores.max())
            alpha = e / e.sum()
            alphas[(k, v)] = alpha
            out_k[v] = (alpha[:, None] * Z[nb]).sum(axis=0)
        outs.append(out_k)
    stacked = np.stack(outs, axis=1)
    combined = stacked.reshape(len(H), -1) if layer.concat else stacked.mean(axis=1)
    return combined + layer.b, alphas


def test_gat_matches_softmax_oracle():
    bundle = random_bundle(n=20, d0=5, k=3, seed=4)
    rng = np.random.default_rng(4)
    concat_layer = GATLayer(
        W=rng.standard_normal((2, 5, 4)).astype(np.float32),
        a_src=rng.standard_normal((2, 4)).astype(np.float32),
        a_dst=rng.standard_normal((2, 4)).astype(np.float32),
        b=rng.standard_normal(8).astype(np.float32),
        concat=True,
    )
    for layer in (concat_layer, random_model("gat", [5, 8], seed=4, heads=2).layers[0]):
        model = ParentModel("gat", [layer], "elu")
        tr = forward(model, bundle)
        want, alphas = gat_oracle(bundle, layer)
        np.testing.assert_allclose(tr.logits, want, atol=1e-5)
        for alpha in alphas.values():
            assert abs(alpha.sum() - 1.0) <= 1e-6


def test_gat_attention_rows_are_simplex():
    bundle = random_bundle(n=25, d0=5, k=3, seed=11)
    layer = random_model("gat", [5, 8], seed=1, heads=2).layers[0]
    _, alphas = gat_oracle(bundle, layer)
    for alpha in alphas.values():
        assert np.all(alpha >= 0) and abs(alpha.sum() - 1.0) <= 1e-6


def test_gin_forward_and_hidden_records():
    bundle = random_bundle(n=15, d0=4, k=2, seed=5)
    model = random_model("gin", [4, 6, 2], seed=5)
    tr = forward(model, bundle)
    assert set(tr.mlp_hidden) == {0, 1}
    assert len(tr.mlp_hidden[0]) == 2
    # oracle for layer 0 on node 0
    layer = model.layers[0]
    agg = (1.0 + layer.eps_gin) * bundle.features + np.stack([
        bundle.features[bundle.neighbors(v)].sum(axis=0) if len(bundle.neighbors(v)) else
        np.zeros(4, np.float32)
        for v in range(bundle.num_nodes)
    ])
    h = agg @ layer.mlp[0][0] + layer.mlp[0][1]
    h = np.maximum(h, 0) @ layer.mlp[1][0] + layer.mlp[1][1]
    np.testing.assert_allclose(tr.U[1], h, atol=1e-5)


def test_trace_shape_and_centering():
    bundle = random_bundle(n=30, d0=6, k=3, seed=6)
    for arch, dims in ARCH_DIMS.items():
        model = random_model(arch, dims, seed=2, heads=4)
        tr = forward(model, bundle)
        assert len(tr.U) == model.depth + 1
        np.testing.assert_allclose(tr.U[0].mean(axis=0), 0.0, atol=1e-5)
        assert tr.U[-1].shape == (30, dims[-1])
        np.testing.assert_array_equal(tr.logits, tr.U[-1])


def test_isolated_node_has_zero_neighbor_term():
    # node 2 is isolated
    b = make_bundle([(0, 1), (1, 0)], 3, np.ones((3, 2), np.float32))
    model = ParentModel("sage", [SAGELayer(
        W_root=np.zeros((2, 2), np.float32),
        W_neigh=np.eye(2, dtype=np.float32),
        b=np.zeros(2, np.float32))], "relu")
    tr = forward(model, b)
    np.testing.assert_array_equal(tr.logits[2], np.zeros(2))


def test_checkpoint_round_trip(tmp_path):
    for arch, dims in ARCH_DIMS.items():
        model = random_model(arch, dims, seed=3, heads=4)
        save_checkpoint(model, tmp_path / arch)
        loaded = load_checkpoint(tmp_path / arch)
        assert loaded.arch == model.arch
        assert loaded.activation == model.activation
        bundle = random_bundle(n=12, d0=dims[0], k=dims[-1], seed=1)
        np.testing.assert_array_equal(
            forward(model, bundle).logits, forward(loaded, bundle).logits
        )


def test_checkpoint_chain_violation(tmp_path):
    w1 = GCNLayer(W=np.zeros((4, 32), np.float32), b=np.zeros(32, np.float32))
    w2 = GCNLayer(W=np.zeros((16, 8), np.float32), b=np.zeros(8, np.float32))
    model = ParentModel("gcn", [w1, w2], "relu")
    with pytest.raises(ValidationError):
        save_checkpoint(model, tmp_path / "bad")


def test_feature_dim_mismatch():
    bundle = random_bundle(n=10, d0=5, k=2, seed=0)
    model = random_model("gcn", [7, 4], seed=0)
    with pytest.raises(ValidationError):
        forward(model, bundle)
