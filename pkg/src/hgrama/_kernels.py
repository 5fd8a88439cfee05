"""Numba kernels: float64-accumulating segment sums over float32 inputs.

Used by the folded calibration path, where the aggregate must track the
per-edge float64 message definition without paying float64 memory
bandwidth. Rows reduce sequentially in ascending source order;
parallelism is across destinations only, so results are deterministic.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange

numba.config.THREADING_LAYER = "workqueue"

KIND_GCN = 0
KIND_SUM = 1
KIND_MEAN = 2


@njit(parallel=True, fastmath=False, cache=False)
def mixture_edge_f32(indptr, sources, Z, offsets, kinds, gates, inv, invdeg, d):
    """Combined gated edge mixture, float32: one pass over the edges.

    Z holds the per-basis node transforms side by side (columns
    offsets[b] .. offsets[b+1]); each basis contributes
    f(e) * Z[u, off + j] with f = g * inv_v * inv_u (gcn), g (sum) or
    g * invdeg_v (mean). Accumulation per destination is sequential in
    ascending source order.
    """
    n = len(indptr) - 1
    nb = len(kinds)
    out = np.zeros((n, d), dtype=np.float32)
    for v in prange(n):
        inv_v = inv[v]
        invdeg_v = invdeg[v]
        for e in range(indptr[v], indptr[v + 1]):
            u = sources[e]
            for b in range(nb):
                if kinds[b] == KIND_GCN:
                    f = gates[b] * inv_v * inv[u]
                elif kinds[b] == KIND_SUM:
                    f = gates[b]
                else:
                    f = gates[b] * invdeg_v
                off = offsets[b]
                for j in range(d):
                    out[v, j] += f * Z[u, off + j]
    return out


@njit(parallel=True, fastmath=False, cache=False)
def mixture_edge_f64(indptr, sources, Z, offsets, kinds, gates, inv, invdeg, d):
    """float64 twin of mixture_edge_f32 over float32 node transforms,
    matching the per-edge float64 message definition used by streaming."""
    n = len(indptr) - 1
    nb = len(kinds)
    out = np.zeros((n, d), dtype=np.float64)
    for v in prange(n):
        inv_v = np.float64(inv[v])
        invdeg_v = np.float64(invdeg[v])
        for e in range(indptr[v], indptr[v + 1]):
            u = sources[e]
            for b in range(nb):
                if kinds[b] == KIND_GCN:
                    f = gates[b] * inv_v * np.float64(inv[u])
                elif kinds[b] == KIND_SUM:
                    f = np.float64(gates[b])
                else:
                    f = gates[b] * invdeg_v
                off = offsets[b]
                for j in range(d):
                    out[v, j] += f * np.float64(Z[u, off + j])
    return out


@njit(parallel=True, fastmath=False, cache=False)
def rowsum_f64(indptr, sources, Z):
    """(N, d) float64 out[v] = sum over u in E_v of Z[u] (Z float32)."""
    n = len(indptr) - 1
    d = Z.shape[1]
    out = np.zeros((n, d), dtype=np.float64)
    for v in prange(n):
        for e in range(indptr[v], indptr[v + 1]):
            u = sources[e]
            for j in range(d):
                out[v, j] += Z[u, j]
    return out


@njit(parallel=True, fastmath=False, cache=False)
def edgesum_f64(indptr, values):
    """(N, d) float64 out[v] = sum over e in E_v of values[e] (float32)."""
    n = len(indptr) - 1
    d = values.shape[1]
    out = np.zeros((n, d), dtype=np.float64)
    for v in prange(n):
        for e in range(indptr[v], indptr[v + 1]):
            for j in range(d):
                out[v, j] += values[e, j]
    return out


@njit(parallel=True, fastmath=False, cache=False)
def calibrated_combine(S, a, b, unit_of, degrees, self_acc, has_self):
    """float32 out = a_v (x) S_v + C_v b_v (+ self terms), float64 math.

    S is the float64 edge aggregate; a and b are (units, d) float32
    looked up through unit_of; degrees supply C_v. A single final
    rounding keeps the result faithful to the per-edge transform.
    """
    n, d = S.shape
    out = np.empty((n, d), dtype=np.float32)
    for v in prange(n):
        u = unit_of[v]
        c = np.float64(degrees[v])
        for j in range(d):
            val = np.float64(a[u, j]) * S[v, j] + c * np.float64(b[u, j])
            if has_self:
                val += np.float64(self_acc[v, j])
            out[v, j] = val
    return out
