"""Operator basis, canonicalization losslessness, mixture forward."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgrama.errors import ValidationError
from hgrama.model_zoo import forward as parent_forward
from hgrama.umpm import (
    AttParams,
    UmpmLayer,
    UmpmModel,
    apply_basis,
    canonicalize,
    identity_padding_layer,
    load_umpm_checkpoint,
    save_umpm_checkpoint,
    umpm_forward,
    verify_equivalence,
)
from conftest import make_bundle, random_bundle, random_model

from test_model_zoo import dense_gcn_oracle


def test_self_basis_identity(small_bundle):
    d = small_bundle.feature_dim
    layer = UmpmLayer(blocks={"self": np.eye(d, dtype=np.float32)}, gates={"self": 1.0})
    out = apply_basis("self", small_bundle.features, layer, small_bundle)
    np.testing.assert_array_equal(out, small_bundle.features)


def test_sum_basis_path_graph():
    edges = [(0, 1), (1, 0), (1, 2), (2, 1)]
    H = np.eye(3, dtype=np.float32)
    b = make_bundle(edges, 3, H)
    layer = UmpmLayer(blocks={"sum": np.eye(3, dtype=np.float32)}, gates={"sum": 1.0})
    out = apply_basis("sum", H, layer, b)
    np.testing.assert_allclose(out[1], H[0] + H[2], atol=1e-6)
    np.testing.assert_allclose(out[0], H[1], atol=1e-6)


def test_gcn_basis_matches_dense_oracle():
    bundle = random_bundle(n=10, d0=4, k=2, seed=3)
    W = np.random.default_rng(0).standard_normal((4, 5)).astype(np.float32)
    layer = UmpmLayer(blocks={"gcn": W}, gates={"gcn": 1.0})
    out = apply_basis("gcn", bundle.features, layer, bundle)
    want = dense_gcn_oracle(bundle, W, np.zeros(5))
    np.testing.assert_allclose(out, want, atol=1e-5)


def test_missing_block_raises(small_bundle):
    layer = UmpmLayer(blocks={"self": np.eye(6, dtype=np.float32)}, gates={"self": 1.0})
    with pytest.raises(ValidationError):
        apply_basis("mean", small_bundle.features, layer, small_bundle)


# -- canonicalization --------------------------------------------------------

def test_gcn_gate_pattern():
    model = random_model("gcn", [6, 8, 3], seed=0)
    canon = canonicalize(model)
    for layer in canon.layers:
        gates = [layer.gate(b) for b in ("self", "gcn", "sum", "mean", "att")]
        assert gates == [0.0, 1.0, 0.0, 0.0, 0.0]


def test_gin_self_block_scaling():
    model = random_model("gin", [4, 4], seed=1)
    model.layers[0].eps_gin = 0.3
    canon = canonicalize(model)
    np.testing.assert_allclose(
        canon.layers[0].blocks["self"], np.float32(1.3) * np.eye(4), atol=0
    )
    np.testing.assert_array_equal(canon.layers[0].blocks["sum"], np.eye(4))


@pytest.mark.parametrize("arch", ["gcn", "sage", "gat", "gin"])
def test_canonicalization_lossless(arch):
    bundle = random_bundle(n=120, d0=10, k=4, seed=13)
    model = random_model(arch, [10, 16, 4], seed=7, heads=4)
    canon = canonicalize(model)
    assert verify_equivalence(model, canon, bundle) <= 1e-5


def test_perturbed_gate_fails_verification(small_bundle):
    model = random_model("gcn", [6, 8, 3], seed=2)
    canon = canonicalize(model)
    canon.layers[0].gates["gcn"] = 1.1
    assert verify_equivalence(model, canon, small_bundle) > 1e-5


def test_zero_features_zero_deviation():
    bundle = random_bundle(n=20, d0=5, k=2, seed=4)
    zero = make_bundle(
        np.stack([bundle.sources,
                  np.repeat(np.arange(bundle.num_nodes), np.diff(bundle.indptr))], axis=1),
        bundle.num_nodes, np.zeros_like(bundle.features),
        labels=bundle.labels, num_classes=bundle.num_classes)
    model = random_model("sage", [5, 8, 2], seed=5)
    canon = canonicalize(model)
    assert verify_equivalence(model, canon, zero) == 0.0


# -- mixture forward ---------------------------------------------------------

def test_all_gates_zero_gives_bias():
    bundle = random_bundle(n=12, d0=4, k=2, seed=6)
    beta = np.array([0.5, -1.0, 2.0], np.float32)
    layer = UmpmLayer(
        blocks={"self": np.zeros((4, 3), np.float32)},
        gates={"self": 0.0},
        bias=beta,
        activation="relu",
    )
    tr = umpm_forward(UmpmModel(layers=[layer]), bundle)
    np.testing.assert_array_equal(tr.logits, np.broadcast_to(beta, (12, 3)))


def test_canonical_trace_identical_to_parent():
    bundle = random_bundle(n=40, d0=6, k=3, seed=7)
    for arch in ("gcn", "sage", "gat", "gin"):
        model = random_model(arch, [6, 12, 3], seed=8, heads=4)
        canon = canonicalize(model)
        ta, tb = parent_forward(model, bundle), umpm_forward(canon, bundle)
        for ua, ub in zip(ta.U, tb.U):
            np.testing.assert_allclose(ua, ub, atol=1e-6)


def test_half_gates_average_single_basis_outputs(small_bundle):
    rng = np.random.default_rng(9)
    d = small_bundle.feature_dim
    W1, W2 = (rng.standard_normal((d, 5)).astype(np.float32) for _ in range(2))
    both = UmpmLayer(blocks={"self": W1, "sum": W2}, gates={"self": 0.5, "sum": 0.5})
    only1 = UmpmLayer(blocks={"self": W1}, gates={"self": 1.0})
    only2 = UmpmLayer(blocks={"sum": W2}, gates={"sum": 1.0})
    H = small_bundle.features
    out = umpm_forward(UmpmModel(layers=[both]), small_bundle).logits
    o1 = umpm_forward(UmpmModel(layers=[only1]), small_bundle).logits
    o2 = umpm_forward(UmpmModel(layers=[only2]), small_bundle).logits
    np.testing.assert_allclose(out, 0.5 * (o1 + o2), atol=1e-6)


@given(g1=st.floats(-2, 2), g2=st.floats(-2, 2), h1=st.floats(-2, 2),
       h2=st.floats(-2, 2), c=st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_gate_linearity(g1, g2, h1, h2, c):
    # superposition: U(g + c*h) = U(g) + c*(U(h) - U(0)) for fixed blocks
    bundle = random_bundle(n=14, d0=4, k=2, seed=10)
    rng = np.random.default_rng(11)
    W1 = rng.standard_normal((4, 3)).astype(np.float32)
    W2 = rng.standard_normal((4, 3)).astype(np.float32)
    beta = rng.standard_normal(3).astype(np.float32)

    def run(ga, gb):
        layer = UmpmLayer(blocks={"self": W1, "mean": W2},
                          gates={"self": ga, "mean": gb}, bias=beta)
        return umpm_forward(UmpmModel(layers=[layer]), bundle).logits.astype(np.float64)

    lhs = run(g1 + c * h1, g2 + c * h2)
    rhs = run(g1, g2) + c * (run(h1, h2) - run(0.0, 0.0))
    np.testing.assert_allclose(lhs, rhs, atol=1e-4)


def test_edgeless_graph_only_self_and_bias():
    b = make_bundle([], 5, np.random.default_rng(1).standard_normal((5, 3)).astype(np.float32))
    rng = np.random.default_rng(2)
    layer = UmpmLayer(
        blocks={
            "self": rng.standard_normal((3, 4)).astype(np.float32),
            "sum": rng.standard_normal((3, 4)).astype(np.float32),
            "mean": rng.standard_normal((3, 4)).astype(np.float32),
            "gcn": rng.standard_normal((3, 4)).astype(np.float32),
        },
        gates={"self": 1.0, "sum": 1.0, "mean": 1.0, "gcn": 0.0},
        bias=rng.standard_normal(4).astype(np.float32),
    )
    for name in ("sum", "mean"):
        np.testing.assert_array_equal(
            apply_basis(name, b.features, layer, b), np.zeros((5, 4), np.float32)
        )
    out = umpm_forward(UmpmModel(layers=[layer]), b).logits
    want = b.features @ layer.blocks["self"] + layer.bias
    np.testing.assert_allclose(out, want, atol=1e-6)


def test_padding_layer_is_identity(small_bundle):
    pad = identity_padding_layer(small_bundle.feature_dim)
    assert pad.is_padding
    tr = umpm_forward(UmpmModel(layers=[pad]), small_bundle)
    np.testing.assert_array_equal(tr.logits, small_bundle.features)


def test_umpm_checkpoint_round_trip(tmp_path):
    bundle = random_bundle(n=16, d0=6, k=3, seed=12)
    for arch in ("gcn", "sage", "gat", "gin"):
        model = random_model(arch, [6, 8, 3], seed=13, heads=4)
        canon = canonicalize(model)
        save_umpm_checkpoint(canon, tmp_path / arch)
        loaded = load_umpm_checkpoint(tmp_path / arch)
        np.testing.assert_array_equal(
            umpm_forward(canon, bundle).logits, umpm_forward(loaded, bundle).logits
        )
        assert loaded.provenance == arch
