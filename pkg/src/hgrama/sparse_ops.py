"""Destination-conditioned aggregation kernels over incoming-CSR adjacency.

Aggregations run as CSR sparse-dense products, which reduce each
destination's terms sequentially in ascending source-id order, so
repeated runs produce bit-identical sums. `node_aggregate` sums source
rows of a node-level array (never materializing per-edge values);
`seg_sum` reduces genuinely per-edge values such as attention terms.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def edge_destinations(indptr: np.ndarray) -> np.ndarray:
    """Destination id of each CSR edge slot."""
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def _selection(indptr: np.ndarray, indices: np.ndarray, n_cols: int, dtype):
    return sp.csr_matrix(
        (np.ones(len(indices), dtype=dtype),
         indices.astype(np.int32, copy=False),
         indptr.astype(np.int32, copy=False)),
        shape=(len(indptr) - 1, n_cols),
    )


def node_aggregate(Z: np.ndarray, indptr: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Per-destination sum of source rows: row v gets sum_{u in E_v} Z_u."""
    A = _selection(indptr, sources, Z.shape[0], Z.dtype)
    return A @ Z


def node_mean(Z: np.ndarray, indptr: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Per-destination mean of source rows; isolated destinations get zeros."""
    s = node_aggregate(Z, indptr, sources)
    deg = np.diff(indptr).astype(Z.dtype)
    deg[deg == 0] = 1
    return s / deg[:, None]


def seg_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Per-destination sum of per-edge values; empty segments yield zeros."""
    flat = values.reshape(values.shape[0], -1) if values.ndim != 2 else values
    if flat.shape[0] == 0:
        out = np.zeros((len(indptr) - 1, flat.shape[1]), dtype=values.dtype)
    else:
        sel = _selection(indptr, np.arange(flat.shape[0]), flat.shape[0], flat.dtype)
        out = sel @ flat
    if values.ndim != 2:
        out = out.reshape((len(indptr) - 1,) + values.shape[1:])
    return out


def seg_mean(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Per-destination mean of per-edge values."""
    s = seg_sum(values, indptr)
    deg = np.diff(indptr).astype(values.dtype)
    deg[deg == 0] = 1
    return s / deg.reshape((-1,) + (1,) * (values.ndim - 1))


def seg_softmax(scores: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Softmax over each destination's incoming edges (numerically shifted).

    `scores` may be (E,) or (E, heads); the softmax runs independently per
    trailing column.
    """
    n = len(indptr) - 1
    lengths = np.diff(indptr)
    nonempty = np.flatnonzero(lengths > 0)
    mx = np.full((n,) + scores.shape[1:], -np.inf, dtype=scores.dtype)
    if len(nonempty):
        mx[nonempty] = np.maximum.reduceat(scores, indptr[nonempty], axis=0)
    dst = edge_destinations(indptr)
    shifted = np.exp(scores - mx[dst])
    denom = seg_sum(shifted, indptr)[dst]
    return shifted / denom


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, np.asarray(slope, dtype=x.dtype) * x)


def gcn_norm_degrees(indptr: np.ndarray) -> np.ndarray:
    """1/sqrt(in_degree + 1): the self-loop-augmented symmetric normalizer."""
    dhat = np.diff(indptr).astype(np.float32) + 1.0
    return 1.0 / np.sqrt(dhat)


def inv_degrees(indptr: np.ndarray) -> np.ndarray:
    """1/in_degree with empty destinations mapped to 1."""
    deg = np.diff(indptr).astype(np.float32)
    deg[deg == 0] = 1
    return (np.float32(1.0) / deg)


def edge_mixture(Z: np.ndarray, indptr: np.ndarray, sources: np.ndarray,
                 kinds, gates, offsets=None, d=None) -> np.ndarray:
    """Gated edge-basis mixture over node transforms via the fused kernel."""
    from ._kernels import mixture_edge_f32

    if offsets is None:
        offsets = [0] * len(kinds)
    if d is None:
        d = Z.shape[1] - max(offsets)
    inv = gcn_norm_degrees(indptr)
    invdeg = inv_degrees(indptr)
    return mixture_edge_f32(
        indptr, sources, np.ascontiguousarray(Z, dtype=np.float32),
        np.asarray(offsets, dtype=np.int64), np.asarray(kinds, dtype=np.int64),
        np.asarray(gates, dtype=np.float32), inv, invdeg, d,
    )


def sum_aggregate(Z: np.ndarray, indptr: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Per-destination sum of source rows through the fused kernel."""
    from ._kernels import KIND_SUM

    return edge_mixture(Z, indptr, sources, [KIND_SUM], [1.0])


def mean_aggregate(Z: np.ndarray, indptr: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Per-destination mean of source rows through the fused kernel."""
    from ._kernels import KIND_MEAN

    return edge_mixture(Z, indptr, sources, [KIND_MEAN], [1.0])


def gcn_aggregate(Z: np.ndarray, indptr: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Self-loop normalized adjacency product: rows of D^-1/2 (A+I) D^-1/2 Z."""
    from ._kernels import KIND_GCN

    inv = gcn_norm_degrees(indptr)[:, None]
    out = edge_mixture(Z, indptr, sources, [KIND_GCN], [1.0])
    out += Z * (inv * inv)
    return out


def gat_attention(
    H: np.ndarray,
    W: np.ndarray,
    a_src: np.ndarray,
    a_dst: np.ndarray,
    leaky_slope: float,
    concat: bool,
    indptr: np.ndarray,
    sources: np.ndarray,
    return_edge_terms: bool = False,
):
    """Multi-head attention aggregation over incoming edges.

    W is (heads, d_in, d_head); a_src / a_dst are (heads, d_head). Heads
    are concatenated when `concat` else averaged. Isolated destinations
    aggregate to zero. Optionally also returns the per-edge contribution
    to the aggregate, laid out like the output.
    """
    heads = W.shape[0]
    Z = np.einsum("nd,hdk->nhk", H, W)            # (N, heads, d_head)
    s_src = np.einsum("nhk,hk->nh", Z, a_src)     # (N, heads)
    s_dst = np.einsum("nhk,hk->nh", Z, a_dst)
    dst = edge_destinations(indptr)
    scores = leaky_relu(s_src[sources] + s_dst[dst], leaky_slope)
    alpha = seg_softmax(scores, indptr)           # (E, heads)
    contrib = alpha[:, :, None] * Z[sources]      # (E, heads, d_head)
    agg = seg_sum(contrib, indptr)                # (N, heads, d_head)
    if concat:
        out = agg.reshape(agg.shape[0], -1)
        edge_terms = contrib.reshape(contrib.shape[0], -1)
    else:
        out = agg.mean(axis=1)
        edge_terms = contrib.mean(axis=1)
    if return_edge_terms:
        return out, edge_terms
    return out
