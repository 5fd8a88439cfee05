"""Torch GNN layers matching the merging engine's forward semantics.

Conventions shared with the engine (the contract tests pin 1e-4
max-abs logit agreement):

* GCN uses symmetric normalization with self loops; degrees come from
  the incoming edge lists (deg + 1).
* SAGE is root transform plus mean-aggregated neighbor transform.
* GAT attends over incoming edges only (no implicit self loops);
  hidden layers concatenate heads, the output layer averages them;
  LeakyReLU slope 0.2; bias added after head combination.
* GIN applies Linear(in, out) / ReLU / Linear(out, out) to
  (1 + eps) h_v + sum of neighbors.

Dropout is applied to layer inputs during training only; exports are
eval-mode.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from bundle_io import CheckpointWriter

DEFAULT_ACTIVATION = {"gcn": "relu", "sage": "relu", "gin": "relu", "gat": "elu"}
DEFAULT_DROPOUT = {"gcn": 0.5, "sage": 0.5, "gin": 0.5, "gat": 0.6}
GAT_HEADS = 8
LEAKY_SLOPE = 0.2


class Graph:
    """Edge tensors shared by every layer."""

    def __init__(self, edges: np.ndarray, num_nodes: int):
        order = np.lexsort((edges[:, 0], edges[:, 1]))
        e = edges[order]
        self.num_nodes = num_nodes
        self.src = torch.from_numpy(e[:, 0].copy()).long()
        self.dst = torch.from_numpy(e[:, 1].copy()).long()
        deg = np.zeros(num_nodes, dtype=np.float32)
        np.add.at(deg, e[:, 1], 1.0)
        self.in_deg = torch.from_numpy(deg)
        self.gcn_inv = torch.from_numpy(1.0 / np.sqrt(deg + 1.0))

    def scatter_sum(self, values: torch.Tensor) -> torch.Tensor:
        out = values.new_zeros((self.num_nodes,) + values.shape[1:])
        idx = self.dst.view(-1, *([1] * (values.dim() - 1))).expand_as(values)
        return out.scatter_add_(0, idx, values)


class GCNLayer(nn.Module):
    def __init__(self, d_in, d_out):
        super().__init__()
        self.W = nn.Parameter(torch.empty(d_in, d_out))
        self.b = nn.Parameter(torch.zeros(d_out))
        nn.init.xavier_uniform_(self.W)

    def forward(self, H, g: Graph):
        T = (H @ self.W) * g.gcn_inv[:, None]
        agg = g.scatter_sum(T[g.src]) + T
        return agg * g.gcn_inv[:, None] + self.b

    def export(self, i, w: CheckpointWriter):
        w.add_tensor(f"layer{i}.W", self.W.detach().numpy())
        w.add_tensor(f"layer{i}.b", self.b.detach().numpy())
        w.add_layer({"kind": "gcn", "in_dim": self.W.shape[0], "out_dim": self.W.shape[1]})


class SAGELayer(nn.Module):
    def __init__(self, d_in, d_out):
        super().__init__()
        self.W_root = nn.Parameter(torch.empty(d_in, d_out))
        self.W_neigh = nn.Parameter(torch.empty(d_in, d_out))
        self.b = nn.Parameter(torch.zeros(d_out))
        nn.init.xavier_uniform_(self.W_root)
        nn.init.xavier_uniform_(self.W_neigh)

    def forward(self, H, g: Graph):
        Z = H @ self.W_neigh
        s = g.scatter_sum(Z[g.src])
        deg = g.in_deg.clamp(min=1.0)[:, None]
        return H @ self.W_root + s / deg + self.b

    def export(self, i, w: CheckpointWriter):
        w.add_tensor(f"layer{i}.W_root", self.W_root.detach().numpy())
        w.add_tensor(f"layer{i}.W_neigh", self.W_neigh.detach().numpy())
        w.add_tensor(f"layer{i}.b", self.b.detach().numpy())
        w.add_layer({"kind": "sage", "in_dim": self.W_root.shape[0],
                     "out_dim": self.W_root.shape[1]})


class GATLayer(nn.Module):
    def __init__(self, d_in, d_out, heads=GAT_HEADS, concat=True):
        super().__init__()
        d_head = d_out // heads if concat else d_out
        if concat and d_out % heads:
            raise ValueError("hidden width must be divisible by the head count")
        self.concat = concat
        self.W = nn.Parameter(torch.empty(heads, d_in, d_head))
        self.a_src = nn.Parameter(torch.empty(heads, d_head))
        self.a_dst = nn.Parameter(torch.empty(heads, d_head))
        self.b = nn.Parameter(torch.zeros(d_out))
        for p in (self.W, self.a_src, self.a_dst):
            nn.init.xavier_uniform_(p.view(p.shape[0], -1))

    def forward(self, H, g: Graph):
        Z = torch.einsum("nd,hdk->nhk", H, self.W)
        s_src = torch.einsum("nhk,hk->nh", Z, self.a_src)
        s_dst = torch.einsum("nhk,hk->nh", Z, self.a_dst)
        scores = F.leaky_relu(s_src[g.src] + s_dst[g.dst], LEAKY_SLOPE)
        # per-destination softmax over incoming edges
        mx = scores.new_full((g.num_nodes, scores.shape[1]), float("-inf"))
        mx = mx.scatter_reduce(0, g.dst[:, None].expand_as(scores), scores,
                               reduce="amax", include_self=True)
        shifted = torch.exp(scores - mx[g.dst])
        denom = g.scatter_sum(shifted)[g.dst]
        alpha = shifted / denom
        contrib = alpha[:, :, None] * Z[g.src]
        agg = g.scatter_sum(contrib)
        out = agg.reshape(g.num_nodes, -1) if self.concat else agg.mean(dim=1)
        return out + self.b

    def export(self, i, w: CheckpointWriter):
        w.add_tensor(f"layer{i}.W", self.W.detach().numpy())
        w.add_tensor(f"layer{i}.a_src", self.a_src.detach().numpy())
        w.add_tensor(f"layer{i}.a_dst", self.a_dst.detach().numpy())
        w.add_tensor(f"layer{i}.b", self.b.detach().numpy())
        heads, d_in, d_head = self.W.shape
        w.add_layer({
            "kind": "gat", "in_dim": d_in,
            "out_dim": heads * d_head if self.concat else d_head,
            "heads": heads, "concat": bool(self.concat),
            "leaky_slope": LEAKY_SLOPE,
        })


class GINLayer(nn.Module):
    def __init__(self, d_in, d_out):
        super().__init__()
        self.eps = nn.Parameter(torch.zeros(()))
        self.lin1 = nn.Linear(d_in, d_out)
        self.lin2 = nn.Linear(d_out, d_out)

    def forward(self, H, g: Graph):
        agg = (1.0 + self.eps) * H + g.scatter_sum(H[g.src])
        return self.lin2(F.relu(self.lin1(agg)))

    def export(self, i, w: CheckpointWriter):
        w.add_tensor(f"layer{i}.mlp0.W", self.lin1.weight.detach().numpy().T)
        w.add_tensor(f"layer{i}.mlp0.b", self.lin1.bias.detach().numpy())
        w.add_tensor(f"layer{i}.mlp1.W", self.lin2.weight.detach().numpy().T)
        w.add_tensor(f"layer{i}.mlp1.b", self.lin2.bias.detach().numpy())
        w.add_layer({
            "kind": "gin", "in_dim": self.lin1.weight.shape[1],
            "out_dim": self.lin2.weight.shape[0],
            "eps_gin": float(self.eps.detach()), "mlp_depth": 2,
        })


LAYER_TYPES = {"gcn": GCNLayer, "sage": SAGELayer, "gat": GATLayer, "gin": GINLayer}


class ParentGNN(nn.Module):
    """Stacked specialist model with the family-default activation."""

    def __init__(self, arch: str, dims: list[int], dropout: float | None = None):
        super().__init__()
        self.arch = arch
        self.activation = DEFAULT_ACTIVATION[arch]
        self.dropout = DEFAULT_DROPOUT[arch] if dropout is None else dropout
        layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            if arch == "gat":
                layers.append(GATLayer(dims[i], dims[i + 1], concat=not last))
            else:
                layers.append(LAYER_TYPES[arch](dims[i], dims[i + 1]))
        self.layers = nn.ModuleList(layers)

    def forward(self, X, g: Graph):
        act = F.relu if self.activation == "relu" else F.elu
        H = X
        for i, layer in enumerate(self.layers):
            H = F.dropout(H, p=self.dropout, training=self.training)
            H = layer(H, g)
            if i < len(self.layers) - 1:
                H = act(H)
        return H

    def export(self, out_dir, config: dict | None = None):
        self.eval()
        w = CheckpointWriter(self.arch, self.activation)
        for i, layer in enumerate(self.layers):
            layer.export(i, w)
        return w.save(out_dir, config=config)
