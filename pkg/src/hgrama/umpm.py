"""Universal operator-mixture layers and lossless canonicalization.

A mixture layer computes U = sum_b g_b P_b(H) + beta over the fixed
operator basis {self, gcn, sum, mean, att}, optionally wrapped by a
post-update MLP so GIN-style layers embed exactly. Canonicalization maps
each native family onto this form with unit gates:

* GCN  -> gcn block holds W.
* SAGE -> self block holds W_root, mean block holds W_neigh.
* GAT  -> att block holds the per-head projections plus score vectors.
* GIN  -> self block (1 + eps) I, sum block I, post-update MLP.

Edge-based bases aggregate over incoming edges only; on an edgeless
graph just the self block and the bias contribute.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import MissingInputError, ValidationError
from .io_bin import TensorReader, TensorWriter
from .model_zoo import (
    ActivationTrace,
    GATLayer,
    GCNLayer,
    GINLayer,
    ParentModel,
    SAGELayer,
    activation_fn,
    forward as parent_forward,
    gin_mlp_forward,
)
from .sparse_ops import (
    edge_destinations,
    gat_attention,
    gcn_aggregate,
    gcn_norm_degrees,
    inv_degrees,
    mean_aggregate,
    sum_aggregate,
)

BASIS = ("self", "gcn", "sum", "mean", "att")
EDGE_BASES = ("gcn", "sum", "mean", "att")


@dataclass
class AttParams:
    a_src: np.ndarray    # (heads, d_head)
    a_dst: np.ndarray
    leaky_slope: float
    concat: bool

    @property
    def heads(self) -> int:
        return self.a_src.shape[0]


@dataclass
class LayerCalibration:
    """Destination-conditioned affine transform on the edge aggregate."""

    granularity: str          # per_node | bucket | global
    a: np.ndarray             # (units, d)
    b: np.ndarray             # (units, d)
    boundaries: np.ndarray    # (K-1,) degree thresholds when bucketed
    eps: float

    def unit_of(self, bundle) -> np.ndarray:
        n = bundle.num_nodes
        if self.granularity == "per_node":
            return np.arange(n)
        if self.granularity == "global":
            return np.zeros(n, dtype=np.int64)
        if self.granularity == "bucket":
            deg = bundle.in_degrees.astype(np.float64)
            return np.searchsorted(self.boundaries, deg, side="left").astype(np.int64)
        raise ValidationError(f"unknown calibration granularity {self.granularity!r}")


@dataclass
class UmpmLayer:
    blocks: dict[str, np.ndarray] = field(default_factory=dict)
    gates: dict[str, float] = field(default_factory=dict)
    bias: np.ndarray | None = None
    block_biases: dict[str, np.ndarray] = field(default_factory=dict)
    att: AttParams | None = None
    post_mlp: list[tuple[np.ndarray, np.ndarray]] | None = None
    activation: str = "relu"
    is_padding: bool = False
    calib: LayerCalibration | None = None

    @property
    def in_dim(self) -> int:
        for name in BASIS:
            if name in self.blocks:
                W = self.blocks[name]
                return W.shape[1] if name == "att" else W.shape[0]
        raise ValidationError("layer has no blocks")

    @property
    def mix_dim(self) -> int:
        """Width of the gated mixture (pre-MLP when one is attached)."""
        for name in BASIS:
            if name in self.blocks:
                W = self.blocks[name]
                if name != "att":
                    return W.shape[1]
                return W.shape[0] * W.shape[2] if self.att.concat else W.shape[2]
        raise ValidationError("layer has no blocks")

    @property
    def out_dim(self) -> int:
        if self.post_mlp:
            return self.post_mlp[-1][0].shape[1]
        return self.mix_dim

    def gate(self, name: str) -> float:
        return float(self.gates.get(name, 0.0))

    def validate(self) -> None:
        d_mix = self.mix_dim
        for name, W in self.blocks.items():
            if name not in BASIS:
                raise ValidationError(f"unknown basis {name!r}")
            if name == "att":
                if self.att is None:
                    raise ValidationError("att block present without attention params")
                if self.att.a_src.shape != (W.shape[0], W.shape[2]):
                    raise ValidationError("attention vector length must equal head width")
            elif W.shape != (self.in_dim, d_mix):
                raise ValidationError(
                    f"block {name!r} shaped {W.shape}, expected ({self.in_dim}, {d_mix})"
                )
        for g in self.gates.values():
            if not np.isfinite(g):
                raise ValidationError("gates must be finite scalars")
        if self.bias is not None and self.bias.shape != (d_mix,):
            raise ValidationError("bias width must match the mixture output")
        if self.post_mlp:
            dims = [self.post_mlp[0][0].shape[0]]
            for W, _ in self.post_mlp:
                dims.append(W.shape[1])
            for k in range(len(self.post_mlp) - 1):
                if self.post_mlp[k][0].shape[1] != self.post_mlp[k + 1][0].shape[0]:
                    raise ValidationError("post-update MLP dims do not chain")
            if dims[0] != d_mix:
                raise ValidationError("post-update MLP input must match mixture width")


@dataclass
class DualBranchLayer:
    """Function-level convex combination of two structurally incompatible
    layers (arises when only one parent carries a post-update MLP).

    U = mix * branch_a(H) + (1 - mix) * branch_b(H).
    """

    branch_a: UmpmLayer
    branch_b: UmpmLayer
    mix: float
    activation: str = "relu"
    is_padding: bool = False

    @property
    def in_dim(self) -> int:
        return self.branch_b.in_dim

    @property
    def out_dim(self) -> int:
        return self.branch_b.out_dim

    def validate(self) -> None:
        self.branch_a.validate()
        self.branch_b.validate()
        if self.branch_a.in_dim != self.branch_b.in_dim:
            raise ValidationError("branch input widths differ")
        if self.branch_a.out_dim != self.branch_b.out_dim:
            raise ValidationError("branch output widths differ")


@dataclass
class UmpmModel:
    layers: list
    provenance: str = ""

    @property
    def depth(self) -> int:
        return len(self.layers)

    def validate(self) -> None:
        for i, layer in enumerate(self.layers):
            layer.validate()
            if i and self.layers[i - 1].out_dim != layer.in_dim:
                raise ValidationError(f"dim chain broken at layer {i}")


def identity_padding_layer(dim: int) -> UmpmLayer:
    """Exact identity layer: self gate 1, W = I, zero bias, linear."""
    return UmpmLayer(
        blocks={"self": np.eye(dim, dtype=np.float32)},
        gates={"self": 1.0},
        bias=np.zeros(dim, dtype=np.float32),
        activation="linear",
        is_padding=True,
    )


# ---------------------------------------------------------------------------
# Basis evaluation
# ---------------------------------------------------------------------------

def scaled_identity_factor(W: np.ndarray) -> float | None:
    """c if W == c * I exactly, else None."""
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        return None
    d = np.diag(W)
    c = d[0]
    if np.any(d != c):
        return None
    if np.count_nonzero(W) != (np.count_nonzero(d) if c != 0 else 0):
        return None
    return float(c)


def _transform(H: np.ndarray, W: np.ndarray) -> np.ndarray:
    """H @ W, taking the elementwise shortcut for exact c*I blocks."""
    c = scaled_identity_factor(W)
    if c is None:
        return H @ W
    if c == 1.0:
        return H
    return np.float32(c) * H


def apply_basis(name: str, H: np.ndarray, layer: UmpmLayer, bundle) -> np.ndarray:
    """Evaluate one basis operator P_b on H (gate not applied).

    These share the exact computations of the native layer families, so
    canonicalized parents reproduce their sources bit for bit.
    """
    if name not in layer.blocks:
        raise ValidationError(f"layer carries no block for basis {name!r}")
    indptr, sources = bundle.indptr, bundle.sources
    W = layer.blocks[name]
    if name == "self":
        return _transform(H, W)
    if name == "gcn":
        return gcn_aggregate(_transform(H, W), indptr, sources)
    if name == "sum":
        return sum_aggregate(_transform(H, W), indptr, sources)
    if name == "mean":
        return mean_aggregate(_transform(H, W), indptr, sources)
    if name == "att":
        p = layer.att
        return gat_attention(
            H, W, p.a_src, p.a_dst, p.leaky_slope, p.concat, indptr, sources,
        )
    raise ValidationError(f"unknown basis {name!r}")


def _edge_mixture_setup(layer: UmpmLayer, H: np.ndarray):
    """Kernel inputs for the active node-valued edge bases.

    Returns (Z, offsets, kinds, gates) or None. Dense blocks share one
    GEMM into a contiguous Z; exact c*I blocks fold their scalar into
    the gate and point their offset at H's columns, so canonical GIN
    layers never materialize a transform.
    """
    from ._kernels import KIND_GCN, KIND_MEAN, KIND_SUM

    kind_of = {"gcn": KIND_GCN, "sum": KIND_SUM, "mean": KIND_MEAN}
    names = [b for b in ("gcn", "sum", "mean")
             if b in layer.blocks and layer.gate(b) != 0.0]
    if not names:
        return None
    dense = []
    short = []
    for n in names:
        c = scaled_identity_factor(layer.blocks[n])
        (dense if c is None else short).append((n, c))
    parts = []
    dense_off = {}
    off = 0
    if dense:
        Ze = H @ np.concatenate([layer.blocks[n] for n, _ in dense], axis=1)
        parts.append(Ze)
        for n, _ in dense:
            dense_off[n] = off
            off += layer.blocks[n].shape[1]
    h_off = None
    if short:
        if dense:
            parts.append(H)
            h_off = off
        else:
            parts = [H]
            h_off = 0
    Z = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
    offsets, kinds, gates = [], [], []
    for n in names:
        kinds.append(kind_of[n])
        c = dict(short).get(n)
        if c is None:
            offsets.append(dense_off[n])
            gates.append(layer.gate(n))
        else:
            offsets.append(h_off)
            gates.append(layer.gate(n) * c)
    return Z, offsets, kinds, gates


def _gcn_node_transform(layer: UmpmLayer, H: np.ndarray, setup):
    """The gcn basis's unscaled node transform, reusing the setup's Z."""
    from ._kernels import KIND_GCN

    Z, offsets, kinds, _ = setup
    for off, kind in zip(offsets, kinds):
        if kind == KIND_GCN:
            block = Z[:, off:off + layer.mix_dim]
            c = scaled_identity_factor(layer.blocks["gcn"])
            if c is not None and c != 1.0:
                return np.float32(c) * block
            return block
    raise ValidationError("gcn basis not in setup")


def edge_message_makers(layer: UmpmLayer, H: np.ndarray, bundle) -> list:
    """Lazy per-edge message blocks for the layer's active edge bases.

    The first entry (when node-valued bases are active) yields the
    combined float64 messages of gcn/sum/mean for an edge slice,
    matching the float64 folded kernel term by term; an attention entry
    follows when that basis is active. Chunked consumers never hold the
    full |E| x d tensor.
    """
    indptr, sources = bundle.indptr, bundle.sources
    dst = edge_destinations(indptr)
    makers = []
    setup = _edge_mixture_setup(layer, H)
    if setup is not None:
        from ._kernels import KIND_GCN, KIND_MEAN

        Z, offsets, kinds, gates = setup
        inv64 = gcn_norm_degrees(indptr).astype(np.float64)
        deg = np.diff(indptr).astype(np.float64)
        deg[deg == 0] = 1
        invdeg64 = 1.0 / deg
        d = layer.mix_dim

        def node_block(sl, Z=Z, offsets=offsets, kinds=kinds, gates=gates, d=d):
            src = sources[sl]
            dv = dst[sl]
            out = np.zeros((len(src), d))
            for off, kind, g in zip(offsets, kinds, gates):
                if kind == KIND_GCN:
                    f = np.float64(g) * inv64[dv] * inv64[src]
                elif kind == KIND_MEAN:
                    f = np.float64(g) * invdeg64[dv]
                else:
                    f = np.full(len(src), np.float64(g))
                out += f[:, None] * Z[src, off:off + d].astype(np.float64)
            return out

        makers.append(node_block)
    if "att" in layer.blocks and layer.gate("att") != 0.0:
        p = layer.att
        _, edge_terms = gat_attention(
            H, layer.blocks["att"], p.a_src, p.a_dst, p.leaky_slope, p.concat,
            indptr, sources, return_edge_terms=True,
        )
        edge_terms = edge_terms.astype(np.float64)
        g_att = np.float64(layer.gate("att"))

        def att_block(sl, edge_terms=edge_terms, g=g_att):
            return g * edge_terms[sl]

        makers.append(att_block)
    return makers


def folded_edge_aggregate(layer: UmpmLayer, H: np.ndarray, bundle) -> np.ndarray:
    """Per-destination float64 sum of the layer's combined edge messages.

    Node-valued bases run the float64 mixture kernel over node-level
    transforms (no per-edge tensor); attention terms, inherently
    per-edge, reduce through the float64 edge sum.
    """
    from ._kernels import edgesum_f64, mixture_edge_f64

    n = bundle.num_nodes
    indptr, sources = bundle.indptr, bundle.sources
    S = np.zeros((n, layer.mix_dim))
    setup = _edge_mixture_setup(layer, H)
    if setup is not None:
        Z, offsets, kinds, gates = setup
        deg = np.diff(indptr).astype(np.float64)
        deg[deg == 0] = 1
        S += mixture_edge_f64(
            indptr, sources, np.ascontiguousarray(Z),
            np.asarray(offsets, dtype=np.int64), np.asarray(kinds, dtype=np.int64),
            np.asarray(gates, dtype=np.float64),
            gcn_norm_degrees(indptr), 1.0 / deg, layer.mix_dim,
        )
    if "att" in layer.blocks and layer.gate("att") != 0.0:
        p = layer.att
        _, edge_terms = gat_attention(
            H, layer.blocks["att"], p.a_src, p.a_dst, p.leaky_slope, p.concat,
            indptr, sources, return_edge_terms=True,
        )
        S += np.float64(layer.gate("att")) * edgesum_f64(
            indptr, np.ascontiguousarray(edge_terms))
    return S


def _mixture_layer_forward(layer: UmpmLayer, H: np.ndarray, bundle, mlp_record=None):
    present = [b for b in BASIS if b in layer.blocks and layer.gate(b) != 0.0]
    d_mix = layer.mix_dim if layer.blocks else (layer.bias.shape[0] if layer.bias is not None else 0)
    indptr, sources = bundle.indptr, bundle.sources

    if layer.calib is None:
        # The fused kernel produces the combined gated edge mixture in one
        # pass; the gcn self-loop, the self basis, and attention add on
        # top (addition is commutative bitwise, so canonicalized layers
        # stay bit-equal to their native parents).
        from ._kernels import mixture_edge_f32

        setup = _edge_mixture_setup(layer, H)
        U = None
        if setup is not None:
            Z, offsets, kinds, gates = setup
            U = mixture_edge_f32(
                indptr, sources, np.ascontiguousarray(Z),
                np.asarray(offsets, dtype=np.int64),
                np.asarray(kinds, dtype=np.int64),
                np.asarray(gates, dtype=np.float32),
                gcn_norm_degrees(indptr), inv_degrees(indptr), d_mix,
            )

        def accumulate(U, P, g, owned):
            if U is None:
                return np.multiply(P, g)
            if g == np.float32(1.0):
                U += P
            elif owned:
                np.multiply(P, g, out=P)
                U += P
            else:
                U += g * P
            return U

        for name in present:
            if name == "self":
                P = _transform(H, layer.blocks["self"])
                U = accumulate(U, P, np.float32(layer.gate(name)), P is not H)
            elif name == "gcn":
                inv = gcn_norm_degrees(indptr)[:, None]
                T = _gcn_node_transform(layer, H, setup)
                U = accumulate(U, T * (inv * inv), np.float32(layer.gate(name)), True)
            elif name == "att":
                p = layer.att
                P = gat_attention(H, layer.blocks["att"], p.a_src, p.a_dst,
                                  p.leaky_slope, p.concat, indptr, sources)
                U = accumulate(U, P, np.float32(layer.gate(name)), True)
            if name in layer.block_biases and U is not None:
                U += layer.block_biases[name]
        if U is None:
            U = np.zeros((bundle.num_nodes, d_mix), dtype=np.float32)
    else:
        # Split self vs edge contributions so the folded affine transform
        # wraps exactly the per-destination edge aggregate.
        self_acc = None
        for name in present:
            g = np.float32(layer.gate(name))
            if name == "self":
                t = g * _transform(H, layer.blocks["self"])
            elif name == "gcn":
                inv = gcn_norm_degrees(indptr)[:, None]
                t = g * (_transform(H, layer.blocks["gcn"]) * inv * inv)
            else:
                t = None
            if t is not None:
                self_acc = t if self_acc is None else self_acc + t
            if name in layer.block_biases:
                bb = layer.block_biases[name]
                self_acc = bb if self_acc is None else self_acc + bb
        from ._kernels import calibrated_combine

        S = folded_edge_aggregate(layer, H, bundle)
        cal = layer.calib
        unit = cal.unit_of(bundle)
        has_self = self_acc is not None
        if not has_self:
            self_acc = np.empty((0, 0), dtype=np.float32)
        U = calibrated_combine(
            S, cal.a, cal.b, unit, bundle.in_degrees,
            np.ascontiguousarray(self_acc), has_self,
        )

    if layer.bias is not None:
        U += layer.bias
    if layer.post_mlp:
        U = gin_mlp_forward(layer.post_mlp, U, record=mlp_record)
    return U.astype(np.float32, copy=False)


def layer_forward(layer, H: np.ndarray, bundle, mlp_record=None) -> np.ndarray:
    if isinstance(layer, DualBranchLayer):
        ua = _mixture_layer_forward(layer.branch_a, H, bundle, mlp_record=mlp_record)
        ub = _mixture_layer_forward(layer.branch_b, H, bundle)
        m = np.float32(layer.mix)
        np.multiply(ua, m, out=ua)
        ub *= np.float32(1.0) - m
        ua += ub
        return ua
    return _mixture_layer_forward(layer, H, bundle, mlp_record=mlp_record)


def umpm_forward(model: UmpmModel, bundle) -> ActivationTrace:
    """Layer-stacked inference; the trace records pre-nonlinearity values
    (post-MLP for layers that carry one)."""
    X = bundle.features
    U_list = [X - X.mean(axis=0, keepdims=True)]
    mlp_hidden: dict[int, list[np.ndarray]] = {}
    H = X
    for i, layer in enumerate(model.layers):
        has_mlp = (
            getattr(layer, "post_mlp", None)
            or (isinstance(layer, DualBranchLayer) and layer.branch_a.post_mlp)
        )
        record: list | None = [] if has_mlp else None
        U = layer_forward(layer, H, bundle, mlp_record=record)
        if record:
            mlp_hidden[i] = record
        U_list.append(U)
        phi = activation_fn(layer.activation)
        H = phi(U) if i < len(model.layers) - 1 else U
    return ActivationTrace(U=U_list, logits=U_list[-1], mlp_hidden=mlp_hidden)


# ---------------------------------------------------------------------------
# Canonicalization
# ---------------------------------------------------------------------------

def canonicalize_layer(layer, activation: str) -> UmpmLayer:
    if isinstance(layer, GCNLayer):
        return UmpmLayer(
            blocks={"gcn": layer.W.copy()},
            gates={"gcn": 1.0},
            bias=layer.b.copy(),
            activation=activation,
        )
    if isinstance(layer, SAGELayer):
        return UmpmLayer(
            blocks={"self": layer.W_root.copy(), "mean": layer.W_neigh.copy()},
            gates={"self": 1.0, "mean": 1.0},
            bias=layer.b.copy(),
            activation=activation,
        )
    if isinstance(layer, GATLayer):
        return UmpmLayer(
            blocks={"att": layer.W.copy()},
            gates={"att": 1.0},
            bias=layer.b.copy(),
            att=AttParams(
                a_src=layer.a_src.copy(),
                a_dst=layer.a_dst.copy(),
                leaky_slope=layer.leaky_slope,
                concat=layer.concat,
            ),
            activation=activation,
        )
    if isinstance(layer, GINLayer):
        d = layer.in_dim
        eye = np.eye(d, dtype=np.float32)
        return UmpmLayer(
            blocks={"self": np.float32(1.0 + layer.eps_gin) * eye, "sum": eye.copy()},
            gates={"self": 1.0, "sum": 1.0},
            bias=np.zeros(d, dtype=np.float32),
            post_mlp=[(W.copy(), b.copy()) for W, b in layer.mlp],
            activation=activation,
        )
    raise ValidationError(f"unsupported layer type {type(layer).__name__}")


def canonicalize(model: ParentModel) -> UmpmModel:
    """Express a native parent as an exact operator mixture."""
    model.validate()
    layers = [canonicalize_layer(l, model.activation) for l in model.layers]
    out = UmpmModel(layers=layers, provenance=model.arch)
    out.validate()
    return out


def verify_equivalence(parent: ParentModel, model: UmpmModel, bundle, eps: float = 1e-5) -> float:
    """Max over layers and nodes of the infinity-norm pre-activation gap."""
    ta = parent_forward(parent, bundle)
    tb = umpm_forward(model, bundle)
    if len(ta.U) != len(tb.U):
        raise ValidationError("trace lengths differ")
    worst = 0.0
    for ua, ub in zip(ta.U, tb.U):
        if ua.shape != ub.shape:
            raise ValidationError(f"trace shapes differ: {ua.shape} vs {ub.shape}")
        worst = max(worst, float(np.max(np.abs(ua - ub))) if ua.size else 0.0)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint container (arch tag "umpm")
# ---------------------------------------------------------------------------

def _pack_mixture_layer(prefix: str, layer: UmpmLayer, tw: TensorWriter) -> dict:
    spec: dict = {
        "kind": "umpm",
        "activation": layer.activation,
        "is_padding": bool(layer.is_padding),
        "gates": {k: float(v) for k, v in sorted(layer.gates.items())},
        "blocks": sorted(layer.blocks),
        "block_biases": sorted(layer.block_biases),
        "in_dim": layer.in_dim,
        "out_dim": layer.out_dim,
    }
    for name in sorted(layer.blocks):
        tw.add(f"{prefix}.{name}.W", layer.blocks[name])
    for name in sorted(layer.block_biases):
        tw.add(f"{prefix}.{name}.b", layer.block_biases[name])
    if layer.bias is not None:
        tw.add(f"{prefix}.bias", layer.bias)
        spec["has_bias"] = True
    else:
        spec["has_bias"] = False
    if layer.att is not None:
        spec["att"] = {
            "heads": int(layer.att.heads),
            "concat": bool(layer.att.concat),
            "leaky_slope": float(layer.att.leaky_slope),
        }
        tw.add(f"{prefix}.att.a_src", layer.att.a_src)
        tw.add(f"{prefix}.att.a_dst", layer.att.a_dst)
    else:
        spec["att"] = None
    if layer.post_mlp:
        spec["post_mlp_depth"] = len(layer.post_mlp)
        for k, (W, b) in enumerate(layer.post_mlp):
            tw.add(f"{prefix}.mlp{k}.W", W)
            tw.add(f"{prefix}.mlp{k}.b", b)
    else:
        spec["post_mlp_depth"] = 0
    if layer.calib is not None:
        spec["calib"] = {
            "granularity": layer.calib.granularity,
            "eps": float(layer.calib.eps),
        }
        tw.add(f"{prefix}.calib.a", layer.calib.a)
        tw.add(f"{prefix}.calib.b", layer.calib.b)
        tw.add(f"{prefix}.calib.boundaries", layer.calib.boundaries.astype(np.float32))
    else:
        spec["calib"] = None
    return spec


def _unpack_mixture_layer(prefix: str, spec: dict, tr: TensorReader) -> UmpmLayer:
    blocks = {name: tr.get(f"{prefix}.{name}.W") for name in spec["blocks"]}
    block_biases = {
        name: tr.get(f"{prefix}.{name}.b").reshape(-1) for name in spec.get("block_biases", [])
    }
    att = None
    if spec.get("att"):
        att = AttParams(
            a_src=tr.get(f"{prefix}.att.a_src"),
            a_dst=tr.get(f"{prefix}.att.a_dst"),
            leaky_slope=float(spec["att"]["leaky_slope"]),
            concat=bool(spec["att"]["concat"]),
        )
    post_mlp = None
    if spec.get("post_mlp_depth"):
        post_mlp = [
            (tr.get(f"{prefix}.mlp{k}.W"), tr.get(f"{prefix}.mlp{k}.b").reshape(-1))
            for k in range(spec["post_mlp_depth"])
        ]
    calib = None
    if spec.get("calib"):
        calib = LayerCalibration(
            granularity=spec["calib"]["granularity"],
            a=tr.get(f"{prefix}.calib.a"),
            b=tr.get(f"{prefix}.calib.b"),
            boundaries=tr.get(f"{prefix}.calib.boundaries").reshape(-1).astype(np.float64),
            eps=float(spec["calib"]["eps"]),
        )
    return UmpmLayer(
        blocks=blocks,
        gates={k: float(v) for k, v in spec["gates"].items()},
        bias=tr.get(f"{prefix}.bias").reshape(-1) if spec.get("has_bias") else None,
        block_biases=block_biases,
        att=att,
        post_mlp=post_mlp,
        activation=spec["activation"],
        is_padding=bool(spec["is_padding"]),
        calib=calib,
    )


def save_umpm_checkpoint(model: UmpmModel, path: str | Path, config: dict | None = None) -> None:
    model.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tw = TensorWriter()
    layer_specs = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, DualBranchLayer):
            layer_specs.append({
                "kind": "dual",
                "mix": float(layer.mix),
                "activation": layer.activation,
                "is_padding": bool(layer.is_padding),
                "branch_a": _pack_mixture_layer(f"layer{i}.a", layer.branch_a, tw),
                "branch_b": _pack_mixture_layer(f"layer{i}.b", layer.branch_b, tw),
            })
        else:
            layer_specs.append(_pack_mixture_layer(f"layer{i}", layer, tw))
    manifest = {
        "format_version": 1,
        "arch": "umpm",
        "provenance": model.provenance,
        "layers": layer_specs,
        "tensors": tw.entries,
    }
    if config is not None:
        manifest["config"] = config
    tw.dump(root / "tensors.bin")
    (root / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_umpm_checkpoint(path: str | Path) -> UmpmModel:
    root = Path(path)
    manifest_path = root / "model.json"
    if not manifest_path.exists():
        raise MissingInputError(f"no model.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("arch") != "umpm":
        raise ValidationError("not an operator-mixture checkpoint")
    tr = TensorReader(root / "tensors.bin", manifest["tensors"])
    layers = []
    for i, spec in enumerate(manifest["layers"]):
        if spec["kind"] == "dual":
            layers.append(DualBranchLayer(
                branch_a=_unpack_mixture_layer(f"layer{i}.a", spec["branch_a"], tr),
                branch_b=_unpack_mixture_layer(f"layer{i}.b", spec["branch_b"], tr),
                mix=float(spec["mix"]),
                activation=spec["activation"],
                is_padding=bool(spec["is_padding"]),
            ))
        else:
            layers.append(_unpack_mixture_layer(f"layer{i}", spec, tr))
    model = UmpmModel(layers=layers, provenance=manifest.get("provenance", ""))
    model.validate()
    return model
