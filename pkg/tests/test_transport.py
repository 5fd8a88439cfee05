"""Parameter transport, depth padding, and the child index layout."""

import numpy as np
import pytest

from hgrama.alignment import compute_plan, procrustes
from hgrama.errors import ValidationError
from hgrama.model_zoo import forward
from hgrama.sparse_ops import gat_attention
from hgrama.transport import (
    aligned_traces,
    build_layout,
    pad_depth,
    transport_attention,
    transport_gin_mlp,
    transport_linear,
    transport_model,
)
from hgrama.umpm import AttParams, UmpmModel, canonicalize, umpm_forward
from conftest import random_bundle, random_model


def rand_orthogonal(rng, d):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return Q


def test_identity_transport_is_noop():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((5, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    Wt, bt = transport_linear(W, b, np.eye(5), np.eye(3))
    np.testing.assert_array_equal(Wt, W)
    np.testing.assert_array_equal(bt, b)


def test_orthogonal_round_trip():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((6, 4)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    Q_in, Q_out = rand_orthogonal(rng, 6), rand_orthogonal(rng, 4)
    Wt, bt = transport_linear(W, b, Q_in, Q_out)
    Wb, bb = transport_linear(Wt, bt, Q_in.T, Q_out.T)
    np.testing.assert_allclose(Wb, W, atol=1e-6)
    np.testing.assert_allclose(bb, b, atol=1e-6)


def test_transport_dim_mismatch():
    with pytest.raises(ValidationError):
        transport_linear(np.zeros((4, 3), np.float32), None, np.eye(5), np.eye(3))


def test_rect_transport_tracks_procrustes_projection():
    """Transported-layer outputs approach the Procrustes-projected outputs
    of the original layer as the maps get more faithful (CKA -> 1)."""
    rng = np.random.default_rng(2)
    n, d_in_a, d_out_a, d_in_b, d_out_b = 80, 8, 6, 5, 4
    H_a = rng.standard_normal((n, d_in_a)).astype(np.float32)
    W = rng.standard_normal((d_in_a, d_out_a)).astype(np.float32)
    U_a = H_a @ W
    # B-side representations: noisy projections of A's
    for noise, label in ((0.0, "clean"), (2.0, "noisy")):
        H_b = (H_a @ rng.standard_normal((d_in_a, d_in_b))
               + noise * rng.standard_normal((n, d_in_b))).astype(np.float32)
        U_b = (U_a @ rng.standard_normal((d_out_a, d_out_b))
               + noise * rng.standard_normal((n, d_out_b))).astype(np.float32)
        R_in = procrustes(H_a, H_b).R
        R_out = procrustes(U_a, U_b).R
        Wt, _ = transport_linear(W, None, R_in, R_out)
        got = (H_a @ R_in) @ Wt              # transported layer on projected input
        want = U_a @ R_out                   # Procrustes-projected original output
        err = np.linalg.norm(got - want) / np.linalg.norm(want)
        if label == "clean":
            clean_err = err
        else:
            assert err >= clean_err          # fidelity degrades with noise


# -- attention -----------------------------------------------------------------

def test_attention_identity_unchanged():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((8, 6, 4)).astype(np.float32)
    att = AttParams(
        a_src=rng.standard_normal((8, 4)).astype(np.float32),
        a_dst=rng.standard_normal((8, 4)).astype(np.float32),
        leaky_slope=0.2, concat=True,
    )
    Wt, att_t, fb = transport_attention(W, att, np.eye(6), np.eye(32))
    assert not fb
    np.testing.assert_array_equal(Wt, W)
    np.testing.assert_array_equal(att_t.a_src, att.a_src)
    assert att_t.concat and att_t.heads == 8


def test_single_head_scores_invariant_under_co_transport():
    bundle = random_bundle(n=5, d0=4, k=2, seed=4, avg_deg=3)
    rng = np.random.default_rng(5)
    W = rng.standard_normal((1, 4, 3)).astype(np.float32)
    att = AttParams(
        a_src=rng.standard_normal((1, 3)).astype(np.float32),
        a_dst=rng.standard_normal((1, 3)).astype(np.float32),
        leaky_slope=0.2, concat=True,
    )
    Q_in, Q_out = rand_orthogonal(rng, 4), rand_orthogonal(rng, 3)
    Wt, att_t, fb = transport_attention(W, att, Q_in, Q_out)
    assert not fb
    H = bundle.features
    out_orig = gat_attention(H, W, att.a_src, att.a_dst, 0.2, True,
                             bundle.indptr, bundle.sources)
    out_t = gat_attention((H @ Q_in).astype(np.float32), Wt, att_t.a_src, att_t.a_dst,
                          0.2, True, bundle.indptr, bundle.sources)
    # rotated inputs + co-transported params = rotated outputs
    np.testing.assert_allclose(out_t, out_orig @ Q_out, atol=1e-4)


def test_multi_head_global_fallback():
    rng = np.random.default_rng(6)
    W = rng.standard_normal((8, 10, 4)).astype(np.float32)
    att = AttParams(
        a_src=rng.standard_normal((8, 4)).astype(np.float32),
        a_dst=rng.standard_normal((8, 4)).astype(np.float32),
        leaky_slope=0.2, concat=True,
    )
    R_in = procrustes(rng.standard_normal((40, 10)), rng.standard_normal((40, 12))).R
    R_out = procrustes(rng.standard_normal((40, 32)), rng.standard_normal((40, 16))).R
    Wt, att_t, fb = transport_attention(W, att, R_in, R_out)
    assert fb
    assert Wt.shape == (1, 12, 16)
    assert att_t.heads == 1 and att_t.concat


def test_averaged_heads_keep_structure():
    rng = np.random.default_rng(7)
    W = rng.standard_normal((4, 6, 3)).astype(np.float32)
    att = AttParams(
        a_src=rng.standard_normal((4, 3)).astype(np.float32),
        a_dst=rng.standard_normal((4, 3)).astype(np.float32),
        leaky_slope=0.2, concat=False,
    )
    Q_in, Q_out = rand_orthogonal(rng, 6), rand_orthogonal(rng, 3)
    Wt, att_t, fb = transport_attention(W, att, Q_in, Q_out)
    assert not fb and att_t.heads == 4 and not att_t.concat
    assert Wt.shape == (4, 6, 3)


# -- GIN MLP -------------------------------------------------------------------

def test_one_sublayer_mlp_reduces_to_linear():
    rng = np.random.default_rng(8)
    W = rng.standard_normal((5, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    Q_in, Q_out = rand_orthogonal(rng, 5), rand_orthogonal(rng, 3)
    got = transport_gin_mlp([(W, b)], Q_in, Q_out)
    want = transport_linear(W, b, Q_in, Q_out)
    np.testing.assert_array_equal(got[0][0], want[0])
    np.testing.assert_array_equal(got[0][1], want[1])


def test_identical_parents_give_identity_intermediates():
    rng = np.random.default_rng(9)
    mlp = [(rng.standard_normal((4, 6)).astype(np.float32), np.zeros(6, np.float32)),
           (rng.standard_normal((6, 3)).astype(np.float32), np.zeros(3, np.float32))]
    hidden = [rng.standard_normal((30, 6)).astype(np.float32),
              rng.standard_normal((30, 3)).astype(np.float32)]
    out = transport_gin_mlp(mlp, np.eye(4), np.eye(3),
                            hidden_a=hidden, hidden_b=[h.copy() for h in hidden])
    for (Wt, bt), (W, b) in zip(out, mlp):
        np.testing.assert_allclose(Wt, W, atol=1e-5)
        np.testing.assert_allclose(bt, b, atol=1e-5)


def test_chained_transport_respects_hidden_fit():
    """Chained maps track the direct projection within the residual of the
    hidden-layer Procrustes fit."""
    rng = np.random.default_rng(10)
    n = 60
    mlp_a = [(rng.standard_normal((5, 6)).astype(np.float32), np.zeros(6, np.float32)),
             (rng.standard_normal((6, 4)).astype(np.float32), np.zeros(4, np.float32))]
    x = rng.standard_normal((n, 5)).astype(np.float32)
    h1 = x @ mlp_a[0][0]
    Q_mid = rand_orthogonal(rng, 6).astype(np.float32)
    hidden_a = [h1, None]
    hidden_b = [h1 @ Q_mid, None]
    hidden_a[1] = np.maximum(h1, 0) @ mlp_a[1][0]
    hidden_b[1] = hidden_a[1].copy()
    out = transport_gin_mlp(mlp_a, np.eye(5), np.eye(4),
                            hidden_a=hidden_a, hidden_b=hidden_b)
    # first sub-layer now writes into the rotated hidden basis
    np.testing.assert_allclose(out[0][0], mlp_a[0][0] @ Q_mid, atol=1e-4)


def test_depth_mismatch_falls_back(caplog):
    rng = np.random.default_rng(11)
    mlp = [(rng.standard_normal((4, 6)).astype(np.float32), np.zeros(6, np.float32)),
           (rng.standard_normal((6, 3)).astype(np.float32), np.zeros(3, np.float32))]
    Q_in, Q_out = rand_orthogonal(rng, 4), rand_orthogonal(rng, 3)
    out = transport_gin_mlp(mlp, Q_in, Q_out, hidden_a=[np.zeros((3, 6))], hidden_b=None)
    np.testing.assert_allclose(out[0][0], Q_in.T @ mlp[0][0], atol=1e-5)
    np.testing.assert_allclose(out[1][0], mlp[1][0] @ Q_out, atol=1e-5)


# -- layout and padding ----------------------------------------------------------

def make_plan_and_traces(arch_a, dims_a, arch_b, dims_b, n=60, seed=0):
    bundle = random_bundle(n=n, d0=dims_a[0], k=dims_a[-1], seed=seed)
    ma = random_model(arch_a, dims_a, seed=seed + 1)
    mb = random_model(arch_b, dims_b, seed=seed + 2)
    ta, tb = forward(ma, bundle), forward(mb, bundle)
    plan = compute_plan(ta, tb, gamma=0.5)
    return bundle, ma, mb, ta, tb, plan


def test_equal_depth_full_diagonal_no_padding():
    bundle, ma, mb, ta, tb, plan = make_plan_and_traces("gcn", [6, 16, 3], "sage", [6, 16, 3])
    layout = build_layout(plan, ta, tb)
    ca, cb = canonicalize(ma), canonicalize(mb)
    tm = transport_model(ca, cb, layout, ta, tb)
    a_model, b_model = pad_depth(tm, cb, plan.matches)
    if plan.matches == [(0, 0), (1, 1), (2, 2)]:
        assert tm.padding_positions == []
        assert a_model.depth == b_model.depth == 2
        for got, want in zip(b_model.layers, cb.layers):
            assert got is want


def test_depth_mismatch_padding_position():
    bundle, ma, mb, ta, tb, plan = make_plan_and_traces(
        "gcn", [6, 16, 3], "gcn", [6, 16, 16, 3], seed=3)
    layout = build_layout(plan, ta, tb)
    assert layout.depth == 3
    ca, cb = canonicalize(ma), canonicalize(mb)
    tm = transport_model(ca, cb, layout, ta, tb)
    a_model, b_model = pad_depth(tm, cb, plan.matches)
    assert a_model.depth == b_model.depth == 3
    assert len(tm.padding_positions) == 1
    pad_layer = a_model.layers[tm.padding_positions[0]]
    assert pad_layer.is_padding and pad_layer.activation == "linear"


def test_padding_layer_forward_is_identity():
    bundle, ma, mb, ta, tb, plan = make_plan_and_traces(
        "sage", [6, 12, 3], "sage", [6, 12, 12, 3], seed=5)
    layout = build_layout(plan, ta, tb)
    ca, cb = canonicalize(ma), canonicalize(mb)
    tm = transport_model(ca, cb, layout, ta, tb)
    a_model, b_model = pad_depth(tm, cb, plan.matches)
    # B' with padding removed equals B: forward through B' == forward through B
    got = umpm_forward(b_model, bundle).logits
    want = umpm_forward(cb, bundle).logits
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_aligned_traces_shapes():
    bundle, ma, mb, ta, tb, plan = make_plan_and_traces(
        "gcn", [6, 16, 3], "gat", [6, 16, 16, 3], seed=7)
    layout = build_layout(plan, ta, tb)
    ua, ub = aligned_traces(layout, ta, tb)
    assert len(ua) == len(ub) == layout.depth + 1
    for x, y in zip(ua, ub):
        assert x.shape == y.shape