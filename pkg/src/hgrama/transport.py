"""Moving parent A's canonical layers into parent B's coordinates.

Every tensor follows the pseudoinverse-as-transpose rule
W~ = R_in^T W R_out, b~ = R_out^T b. Attention score vectors transform
in the output space; multi-head blocks fall back to one global map on
the concatenated representation when head geometry cannot be preserved.
Post-update MLPs are transported sub-layer by sub-layer, chaining fresh
Procrustes maps fitted on matched MLP hidden pre-activations.

Depth mismatch is resolved on a common child index grid: between two
matched pairs the shorter side repeats its boundary (earliest
insertion), which later becomes an identity padding layer. Intermediate
child boundaries that the DP left unmatched get fresh Procrustes maps
between the corresponding trace rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import pairwise

import numpy as np

from .alignment import AlignmentPlan, TransportMap, procrustes
from .errors import ValidationError
from .umpm import AttParams, UmpmLayer, UmpmModel, identity_padding_layer

logger = logging.getLogger(__name__)


def transport_linear(W: np.ndarray, b: np.ndarray | None,
                     R_in: np.ndarray, R_out: np.ndarray):
    """W~ = R_in^T W R_out and b~ = R_out^T b (float64 math, f32 result).

    A c*I block sandwiched by one tall map on both sides stays exactly
    c*I (R^T R = I), which also keeps the block's structure cheap.
    """
    if W.shape[0] != R_in.shape[0] or W.shape[1] != R_out.shape[0]:
        raise ValidationError(
            f"transport dims mismatch: W {W.shape}, R_in {R_in.shape}, R_out {R_out.shape}"
        )
    from .umpm import scaled_identity_factor

    c = scaled_identity_factor(W)
    if (
        c is not None and R_in is R_out
        and R_in.shape[0] >= R_in.shape[1]
    ):
        Wt64 = np.float64(c) * np.eye(R_in.shape[1])
    else:
        Wt64 = (R_in.T.astype(np.float64) @ W.astype(np.float64)
                @ R_out.astype(np.float64))
    bt = None
    if b is not None:
        bt = (R_out.T.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    return Wt64.astype(np.float32), bt


def _is_identity(R: np.ndarray) -> bool:
    return R.shape[0] == R.shape[1] and np.allclose(R, np.eye(R.shape[0]), atol=1e-12)


def transport_attention(W: np.ndarray, att: AttParams,
                        R_in: np.ndarray, R_out: np.ndarray):
    """Transport an attention block; returns (W~, att~, fallback_used).

    Identity maps leave everything unchanged. Averaged-head layers share
    the output map across heads (each head already lives in the output
    space); a concatenated multi-head block collapses to a single global
    head on the concatenated representation.
    """
    heads, d_in, d_head = W.shape
    if _is_identity(R_in) and _is_identity(R_out):
        return W.copy(), AttParams(att.a_src.copy(), att.a_dst.copy(),
                                   att.leaky_slope, att.concat), False
    if not att.concat or heads == 1:
        # per-head transport: the head width equals the layer output width
        Wt = np.stack([
            transport_linear(W[k], None, R_in, R_out)[0] for k in range(heads)
        ])
        a_src = (att.a_src.astype(np.float64) @ R_out).astype(np.float32)
        a_dst = (att.a_dst.astype(np.float64) @ R_out).astype(np.float32)
        return Wt, AttParams(a_src, a_dst, att.leaky_slope, att.concat), False
    # global map on the concatenated representation (head-major columns)
    W_cat = W.transpose(1, 0, 2).reshape(d_in, heads * d_head)
    Wt, _ = transport_linear(W_cat, None, R_in, R_out)
    a_src = (att.a_src.reshape(1, -1).astype(np.float64) @ R_out).astype(np.float32)
    a_dst = (att.a_dst.reshape(1, -1).astype(np.float64) @ R_out).astype(np.float32)
    logger.info(
        "attention transport fell back to the global concatenated map "
        "(%d heads, %d -> %d columns)", heads, heads * d_head, R_out.shape[1],
    )
    return Wt[None, :, :], AttParams(a_src, a_dst, att.leaky_slope, True), True


def transport_gin_mlp(mlp, R_in: np.ndarray, R_out: np.ndarray,
                      hidden_a=None, hidden_b=None,
                      subsample: np.ndarray | None = None):
    """Chain-transport MLP sub-layers: sub-layer k gets (R_{k-1}, R_k).

    Intermediate maps come from Procrustes fits on matched hidden
    pre-activations; when the two parents' MLP depths differ (or traces
    are unavailable) the intermediates fall back to identity.
    """
    depth = len(mlp)
    boundary: list[np.ndarray] = [R_in]
    usable = (
        hidden_a is not None and hidden_b is not None
        and len(hidden_a) == depth and len(hidden_b) == depth
    )
    if not usable and depth > 1:
        logger.warning(
            "MLP hidden traces unavailable or depth-mismatched; "
            "using identity maps between sub-layers"
        )
    for k in range(depth - 1):
        if usable:
            ha = hidden_a[k] if subsample is None else hidden_a[k][subsample]
            hb = hidden_b[k] if subsample is None else hidden_b[k][subsample]
            boundary.append(procrustes(ha, hb).R)
        else:
            boundary.append(np.eye(mlp[k][0].shape[1]))
    boundary.append(R_out)
    out = []
    for k, (W, b) in enumerate(mlp):
        Wt, bt = transport_linear(W, b, boundary[k], boundary[k + 1])
        out.append((Wt, bt))
    return out


# ---------------------------------------------------------------------------
# Child index layout and whole-model transport
# ---------------------------------------------------------------------------

@dataclass
class ChildLayout:
    """Aligned index grid: child boundary l pairs A trace aidx[l] with
    B trace bidx[l]; maps[l] carries that boundary's transport map."""

    aidx: list[int]
    bidx: list[int]
    maps: list[TransportMap]

    @property
    def depth(self) -> int:
        return len(self.aidx) - 1

    def a_pads(self) -> list[int]:
        return [l for l in range(1, len(self.aidx)) if self.aidx[l] == self.aidx[l - 1]]

    def b_pads(self) -> list[int]:
        return [l for l in range(1, len(self.bidx)) if self.bidx[l] == self.bidx[l - 1]]


def build_layout(plan: AlignmentPlan, trace_a, trace_b,
                 subsample: np.ndarray | None = None) -> ChildLayout:
    """Expand the match set into per-slot index pairs with padding slots.

    The shorter side of each inter-match segment repeats its boundary at
    the earliest slots; when parent A needs padding, slots whose B step
    preserves width are preferred so padding layers stay exact
    identities.
    """
    widths_b = [u.shape[1] for u in trace_b.U]
    aidx, bidx = [0], [0]
    for (i1, j1), (i2, j2) in pairwise(plan.matches):
        da, db = i2 - i1, j2 - j1
        seg = max(da, db)
        a_adv = [True] * seg
        b_adv = [True] * seg
        if da < seg:
            n_pad = seg - da
            preferred = [t for t in range(seg) if widths_b[j1 + t] == widths_b[j1 + t + 1]]
            rest = [t for t in range(seg) if t not in preferred]
            for t in sorted((preferred + rest)[:n_pad]):
                a_adv[t] = False
        if db < seg:
            for t in range(seg - db):
                b_adv[t] = False
        ai, bi = i1, j1
        for t in range(seg):
            ai += a_adv[t]
            bi += b_adv[t]
            aidx.append(ai)
            bidx.append(bi)
    maps = []
    for a_i, b_j in zip(aidx, bidx):
        if (a_i, b_j) in plan.maps:
            maps.append(plan.maps[(a_i, b_j)])
        else:
            ua = trace_a.U[a_i] if subsample is None else trace_a.U[a_i][subsample]
            ub = trace_b.U[b_j] if subsample is None else trace_b.U[b_j][subsample]
            maps.append(procrustes(ua, ub, src_layer=a_i, dst_layer=b_j))
    return ChildLayout(aidx=aidx, bidx=bidx, maps=maps)


@dataclass
class TransportedModel:
    """Parent A re-expressed on the child grid in B-space coordinates."""

    layers: list[UmpmLayer]
    padding_positions: list[int]
    applied_maps: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    layout: ChildLayout | None = None

    @property
    def depth(self) -> int:
        return len(self.layers)


def _rect_identity(d_in: int, d_out: int) -> UmpmLayer:
    return UmpmLayer(
        blocks={"self": np.eye(d_in, d_out, dtype=np.float32)},
        gates={"self": 1.0},
        bias=np.zeros(d_out, dtype=np.float32),
        activation="linear",
        is_padding=True,
    )


def transport_layer(layer: UmpmLayer, R_in: np.ndarray, R_out: np.ndarray,
                    hidden_a=None, hidden_b=None,
                    subsample: np.ndarray | None = None) -> UmpmLayer:
    """Transport one canonical layer's tensors into B-space.

    Blocks of a layer that carries a post-update MLP live in the MLP's
    input space, which shares the layer-input coordinates, so they use
    R_in on both sides; the MLP itself consumes (R_in, ..., R_out).
    """
    R_mix = R_in if layer.post_mlp else R_out
    blocks = {}
    att_params = layer.att
    for name, W in layer.blocks.items():
        if name == "att":
            blocks[name], att_params, _ = transport_attention(W, layer.att, R_in, R_out)
        else:
            blocks[name], _ = transport_linear(W, None, R_in, R_mix)
    block_biases = {}
    for name, bb in layer.block_biases.items():
        block_biases[name] = (R_mix.T.astype(np.float64) @ bb.astype(np.float64)).astype(np.float32)
    bias = None
    if layer.bias is not None:
        bias = (R_mix.T.astype(np.float64) @ layer.bias.astype(np.float64)).astype(np.float32)
    post_mlp = None
    if layer.post_mlp:
        post_mlp = transport_gin_mlp(
            layer.post_mlp, R_in, R_out,
            hidden_a=hidden_a, hidden_b=hidden_b, subsample=subsample,
        )
    return UmpmLayer(
        blocks=blocks,
        gates=dict(layer.gates),
        bias=bias,
        block_biases=block_biases,
        att=att_params,
        post_mlp=post_mlp,
        activation=layer.activation,
        is_padding=False,
    )


def transport_model(canon_a: UmpmModel, canon_b: UmpmModel, layout: ChildLayout,
                    trace_a=None, trace_b=None,
                    subsample: np.ndarray | None = None) -> TransportedModel:
    """Transport every real A layer onto the child grid; A-pad slots get
    identity layers in B-space widths."""
    layers: list[UmpmLayer] = []
    applied = []
    pads = []
    for l in range(1, layout.depth + 1):
        R_in = layout.maps[l - 1].R
        R_out = layout.maps[l].R
        applied.append((R_in, R_out))
        if layout.aidx[l] == layout.aidx[l - 1]:
            d_in, d_out = R_in.shape[1], R_out.shape[1]
            layers.append(
                identity_padding_layer(d_in) if d_in == d_out
                else _rect_identity(d_in, d_out)
            )
            if d_in != d_out:
                logger.warning(
                    "padding slot %d spans widths %d -> %d; using a truncated identity",
                    l, d_in, d_out,
                )
            pads.append(l - 1)
            continue
        a_layer_idx = layout.aidx[l] - 1
        layer = canon_a.layers[a_layer_idx]
        hidden_a = hidden_b = None
        if layer.post_mlp and trace_a is not None:
            hidden_a = trace_a.mlp_hidden.get(a_layer_idx)
            if layout.bidx[l] != layout.bidx[l - 1] and trace_b is not None:
                b_layer_idx = layout.bidx[l] - 1
                b_layer = canon_b.layers[b_layer_idx]
                if b_layer.post_mlp and len(b_layer.post_mlp) == len(layer.post_mlp):
                    hidden_b = trace_b.mlp_hidden.get(b_layer_idx)
        layers.append(transport_layer(
            layer, R_in, R_out,
            hidden_a=hidden_a, hidden_b=hidden_b, subsample=subsample,
        ))
    return TransportedModel(
        layers=layers, padding_positions=pads, applied_maps=applied, layout=layout
    )


def pad_depth(transported_a: TransportedModel, umpm_b: UmpmModel,
              matches) -> tuple[UmpmModel, UmpmModel]:
    """Assemble the depth-aligned pair (A', B') on the child grid.

    A' comes out of transport already padded; B' inserts identity
    padding layers at the slots where its index repeats. Matched pairs
    stay index-aligned.
    """
    layout = transported_a.layout
    if layout is None:
        raise ValidationError("transported model carries no layout")
    if matches and (layout.aidx[-1], layout.bidx[-1]) != matches[-1]:
        raise ValidationError("layout does not end at the final anchor")
    b_layers = []
    for l in range(1, layout.depth + 1):
        if layout.bidx[l] == layout.bidx[l - 1]:
            d = umpm_b.layers[layout.bidx[l] - 1].out_dim if layout.bidx[l] > 0 else (
                umpm_b.layers[0].in_dim)
            b_layers.append(identity_padding_layer(d))
        else:
            b_layers.append(umpm_b.layers[layout.bidx[l] - 1])
    a_model = UmpmModel(layers=transported_a.layers, provenance="transported")
    b_model = UmpmModel(layers=b_layers, provenance=umpm_b.provenance)
    a_model.validate()
    b_model.validate()
    return a_model, b_model


def aligned_traces(layout: ChildLayout, trace_a, trace_b):
    """(U~_A, U_B) per child boundary: A rows projected through the
    boundary maps, B rows taken as-is."""
    ua = [
        (trace_a.U[layout.aidx[l]].astype(np.float64) @ layout.maps[l].R).astype(np.float32)
        for l in range(layout.depth + 1)
    ]
    ub = [trace_b.U[layout.bidx[l]] for l in range(layout.depth + 1)]
    return ua, ub
