"""Native GCN / GAT / GraphSAGE / GIN layers, checkpoints, and inference.

Forward semantics (U is the pre-activation recorded in traces):

* GCN:  U = D^-1/2 (A+I) D^-1/2 H W + b, degrees from incoming edges.
* SAGE: U = H W_root + mean_{u in E_v}(H_u) W_neigh + b.
* GAT:  per-head softmax attention over incoming edges, leaky-relu
  scores; hidden layers concatenate heads, the output layer averages.
* GIN:  U = MLP((1 + eps) H_v + sum_{u in E_v} H_u), ReLU between
  MLP sub-layers, none after the last.

Isolated nodes contribute zero neighbor terms; the GCN self-loop keeps
its normalization finite. The trace stores the centered input, each
layer's pre-activation, and the final logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingInputError, ValidationError
from .io_bin import TensorReader, TensorWriter
from .sparse_ops import gat_attention, gcn_aggregate, mean_aggregate, sum_aggregate

ARCHS = ("gcn", "gat", "sage", "gin")
DEFAULT_ACTIVATION = {"gcn": "relu", "sage": "relu", "gin": "relu", "gat": "elu"}


@dataclass
class GCNLayer:
    W: np.ndarray
    b: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]


@dataclass
class SAGELayer:
    W_root: np.ndarray
    W_neigh: np.ndarray
    b: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.W_root.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W_root.shape[1]


@dataclass
class GATLayer:
    W: np.ndarray        # (heads, d_in, d_head)
    a_src: np.ndarray    # (heads, d_head)
    a_dst: np.ndarray    # (heads, d_head)
    b: np.ndarray        # (out_dim,)
    concat: bool
    leaky_slope: float = 0.2

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0] * self.W.shape[2] if self.concat else self.W.shape[2]


@dataclass
class GINLayer:
    eps_gin: float
    mlp: list[tuple[np.ndarray, np.ndarray]]   # [(W_i, b_i), ...]

    @property
    def in_dim(self) -> int:
        return self.mlp[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.mlp[-1][0].shape[1]


LayerSpec = GCNLayer | SAGELayer | GATLayer | GINLayer


@dataclass
class ParentModel:
    arch: str
    layers: list
    activation: str

    @property
    def depth(self) -> int:
        return len(self.layers)

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValidationError(f"unknown arch {self.arch!r}")
        if not self.layers:
            raise ValidationError("model has no layers")
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_dim != self.layers[i + 1].in_dim:
                raise ValidationError(
                    f"dim chain broken: layer {i} out={self.layers[i].out_dim}, "
                    f"layer {i + 1} in={self.layers[i + 1].in_dim}"
                )
        for i, layer in enumerate(self.layers):
            if isinstance(layer, GATLayer):
                if layer.a_src.shape != (layer.heads, layer.W.shape[2]):
                    raise ValidationError(f"layer {i}: attention vector length mismatch")
            if isinstance(layer, GINLayer):
                for k in range(len(layer.mlp) - 1):
                    if layer.mlp[k][0].shape[1] != layer.mlp[k + 1][0].shape[0]:
                        raise ValidationError(f"layer {i}: GIN MLP dims do not chain")


@dataclass
class ActivationTrace:
    """Centered input, per-layer pre-activations, and logits.

    For GIN layers the recorded pre-activation is the post-MLP value (it
    is what the next layer consumes); the MLP's internal sub-layer
    pre-activations are kept separately for transport.
    """

    U: list[np.ndarray]
    logits: np.ndarray
    mlp_hidden: dict[int, list[np.ndarray]] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.U) - 1


def activation_fn(name: str):
    if name == "relu":
        return lambda x: np.maximum(x, 0)
    if name == "elu":
        return lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
    if name == "linear":
        return lambda x: x
    raise ValidationError(f"unknown activation {name!r}")


def gin_mlp_forward(mlp, x: np.ndarray, record: list | None = None) -> np.ndarray:
    """Linear chain with ReLU between sub-layers, none after the last."""
    h = x
    for k, (W, b) in enumerate(mlp):
        if k > 0:
            h = np.maximum(h, 0)
        h = h @ W + b
        if record is not None:
            record.append(h)
    return h


def layer_forward(layer, H: np.ndarray, bundle, mlp_record: list | None = None) -> np.ndarray:
    """One layer's pre-activation on input H."""
    indptr, sources = bundle.indptr, bundle.sources
    if isinstance(layer, GCNLayer):
        return gcn_aggregate(H @ layer.W, indptr, sources) + layer.b
    if isinstance(layer, SAGELayer):
        neigh = mean_aggregate(H @ layer.W_neigh, indptr, sources)
        return H @ layer.W_root + neigh + layer.b
    if isinstance(layer, GATLayer):
        out = gat_attention(
            H, layer.W, layer.a_src, layer.a_dst,
            layer.leaky_slope, layer.concat, indptr, sources,
        )
        return out + layer.b
    if isinstance(layer, GINLayer):
        agg = np.float32(1.0 + layer.eps_gin) * H + sum_aggregate(H, indptr, sources)
        return gin_mlp_forward(layer.mlp, agg, record=mlp_record)
    raise ValidationError(f"unsupported layer type {type(layer).__name__}")


def forward(model: ParentModel, bundle) -> ActivationTrace:
    """Full-graph eval-mode inference recording the pre-activation trace."""
    X = bundle.features
    if X.shape[1] != model.layers[0].in_dim:
        raise ValidationError(
            f"feature dim {X.shape[1]} does not match model input "
            f"dim {model.layers[0].in_dim}"
        )
    phi = activation_fn(model.activation)
    U_list = [X - X.mean(axis=0, keepdims=True)]
    mlp_hidden: dict[int, list[np.ndarray]] = {}
    H = X
    for i, layer in enumerate(model.layers):
        record: list | None = [] if isinstance(layer, GINLayer) else None
        U = layer_forward(layer, H, bundle, mlp_record=record)
        if record is not None:
            mlp_hidden[i] = record
        U_list.append(U)
        H = phi(U) if i < len(model.layers) - 1 else U
    return ActivationTrace(U=U_list, logits=U_list[-1], mlp_hidden=mlp_hidden)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def _layer_manifest_and_tensors(i: int, layer, tw: TensorWriter) -> dict:
    if isinstance(layer, GCNLayer):
        tw.add(f"layer{i}.W", layer.W)
        tw.add(f"layer{i}.b", layer.b)
        return {"kind": "gcn", "in_dim": layer.in_dim, "out_dim": layer.out_dim}
    if isinstance(layer, SAGELayer):
        tw.add(f"layer{i}.W_root", layer.W_root)
        tw.add(f"layer{i}.W_neigh", layer.W_neigh)
        tw.add(f"layer{i}.b", layer.b)
        return {"kind": "sage", "in_dim": layer.in_dim, "out_dim": layer.out_dim}
    if isinstance(layer, GATLayer):
        tw.add(f"layer{i}.W", layer.W)
        tw.add(f"layer{i}.a_src", layer.a_src)
        tw.add(f"layer{i}.a_dst", layer.a_dst)
        tw.add(f"layer{i}.b", layer.b)
        return {
            "kind": "gat",
            "in_dim": layer.in_dim,
            "out_dim": layer.out_dim,
            "heads": layer.heads,
            "concat": bool(layer.concat),
            "leaky_slope": float(layer.leaky_slope),
        }
    if isinstance(layer, GINLayer):
        for k, (W, b) in enumerate(layer.mlp):
            tw.add(f"layer{i}.mlp{k}.W", W)
            tw.add(f"layer{i}.mlp{k}.b", b)
        return {
            "kind": "gin",
            "in_dim": layer.in_dim,
            "out_dim": layer.out_dim,
            "eps_gin": float(layer.eps_gin),
            "mlp_depth": len(layer.mlp),
        }
    raise ValidationError(f"cannot serialize layer type {type(layer).__name__}")


def save_checkpoint(model: ParentModel, path: str | Path, config: dict | None = None) -> None:
    model.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tw = TensorWriter()
    layer_specs = [_layer_manifest_and_tensors(i, l, tw) for i, l in enumerate(model.layers)]
    manifest = {
        "format_version": 1,
        "arch": model.arch,
        "activation": model.activation,
        "layers": layer_specs,
        "tensors": tw.entries,
    }
    if config is not None:
        manifest["config"] = config
    tw.dump(root / "tensors.bin")
    (root / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _layer_from_manifest(i: int, spec: dict, tr: TensorReader):
    kind = spec["kind"]
    if kind == "gcn":
        return GCNLayer(W=tr.get(f"layer{i}.W"), b=tr.get(f"layer{i}.b").reshape(-1))
    if kind == "sage":
        return SAGELayer(
            W_root=tr.get(f"layer{i}.W_root"),
            W_neigh=tr.get(f"layer{i}.W_neigh"),
            b=tr.get(f"layer{i}.b").reshape(-1),
        )
    if kind == "gat":
        return GATLayer(
            W=tr.get(f"layer{i}.W"),
            a_src=tr.get(f"layer{i}.a_src"),
            a_dst=tr.get(f"layer{i}.a_dst"),
            b=tr.get(f"layer{i}.b").reshape(-1),
            concat=bool(spec["concat"]),
            leaky_slope=float(spec["leaky_slope"]),
        )
    if kind == "gin":
        mlp = [
            (tr.get(f"layer{i}.mlp{k}.W"), tr.get(f"layer{i}.mlp{k}.b").reshape(-1))
            for k in range(int(spec["mlp_depth"]))
        ]
        return GINLayer(eps_gin=float(spec["eps_gin"]), mlp=mlp)
    raise ValidationError(f"unknown layer kind {kind!r}")


def load_checkpoint(path: str | Path):
    """Load a checkpoint; dispatches to the operator-mixture loader for
    arch 'umpm'."""
    root = Path(path)
    manifest_path = root / "model.json"
    if not manifest_path.exists():
        raise MissingInputError(f"no model.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    arch = manifest.get("arch")
    if arch == "umpm":
        from .umpm import load_umpm_checkpoint
        return load_umpm_checkpoint(root)
    if arch not in ARCHS:
        raise ValidationError(f"unknown arch {arch!r} in checkpoint manifest")
    tr = TensorReader(root / "tensors.bin", manifest["tensors"])
    layers = [_layer_from_manifest(i, s, tr) for i, s in enumerate(manifest["layers"])]
    model = ParentModel(arch=arch, layers=layers, activation=manifest["activation"])
    model.validate()
    return model
