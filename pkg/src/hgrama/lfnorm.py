"""Destination-conditioned edge-message moment calibration.

Per destination v the layer's combined edge message is
m_e = sum_{b in edge bases} g_b m_{e,b}. A single chunked pass
accumulates S_v = sum m_e, Q_v = sum m_e (x) m_e and C_v = |E_v| without
ever holding the |E| x d message tensor; moments follow as mu = S/C,
nu = Q/C, sigma^2 = nu - mu (x) mu (clamped at zero). Targets mix the
transported parent moments with the fusion coefficient, and the affine
correction folds into the aggregate as a_v (x) S_v + C_v b_v.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .graph_store import degree_buckets
from .sparse_ops import edge_destinations
from .umpm import (
    EDGE_BASES,
    DualBranchLayer,
    LayerCalibration,
    UmpmLayer,
    UmpmModel,
    activation_fn,
    edge_message_makers,
    layer_forward,
)

logger = logging.getLogger(__name__)

ZERO_VAR_THRESHOLD = 1e-7


@dataclass
class CalibrationStats:
    """Streamed sufficient statistics at one granularity."""

    granularity: str          # per_node | bucket | global
    layer: int
    S: np.ndarray             # (units, d) float64 message sums
    Q: np.ndarray             # (units, d) float64 squared-message sums
    C: np.ndarray             # (units,) float64 edge counts
    boundaries: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def mu(self) -> np.ndarray:
        c = np.where(self.C > 0, self.C, 1.0)[:, None]
        return self.S / c

    @property
    def nu(self) -> np.ndarray:
        c = np.where(self.C > 0, self.C, 1.0)[:, None]
        return self.Q / c

    @property
    def sigma(self) -> np.ndarray:
        var = np.maximum(self.nu - self.mu * self.mu, 0.0)
        return np.sqrt(var)

    def check(self) -> None:
        if np.any(self.nu < self.mu * self.mu - 1e-6):
            raise ValidationError("second moments violate nu >= mu^2")
        if np.any(self.sigma < 0):
            raise ValidationError("sigma must be nonnegative")


MAX_SCALE_CORRECTION = 10.0


@dataclass
class CalibrationParams:
    """Folded affine parameters a_v, b_v plus the targets they encode."""

    a: np.ndarray             # (units, d)
    b: np.ndarray             # (units, d)
    eps: float
    granularity: str
    boundaries: np.ndarray
    mu_target: np.ndarray | None = None
    sigma_target: np.ndarray | None = None
    full_affine: np.ndarray | None = None   # (units, d) bool: scale+shift applied


@dataclass
class TargetMoments:
    granularity: str
    mu: np.ndarray
    nu: np.ndarray
    sigma: np.ndarray


def _dest_unit_map(bundle, granularity: str, num_buckets: int):
    """(num_units, unit_of, boundaries) for a granularity tag."""
    n = bundle.num_nodes
    if granularity == "per_node":
        return n, np.arange(n), np.empty(0)
    if granularity == "global":
        return 1, np.zeros(n, dtype=np.int64), np.empty(0)
    if granularity == "bucket":
        ba = degree_buckets(bundle.in_degrees, num_buckets=num_buckets)
        return ba.num_buckets, ba.bucket_of, ba.boundaries
    raise ValidationError(f"unknown granularity {granularity!r}")


def stream_layer_moments(layer: UmpmLayer, H: np.ndarray, bundle,
                         granularity: str = "per_node", num_buckets: int = 32,
                         out_map: np.ndarray | None = None, layer_index: int = -1,
                         chunk_edges: int = 1 << 18) -> CalibrationStats:
    """One pass over the layer's edge messages on input H.

    `out_map` projects each message into another coordinate system before
    squaring (used to transport parent statistics). A calibration already
    installed on the layer is applied per edge, so streaming a calibrated
    layer measures its realized moments.
    """
    if isinstance(layer, DualBranchLayer):
        raise ValidationError("dual layers stream per branch")
    n = bundle.num_nodes
    indptr = bundle.indptr
    makers = edge_message_makers(layer, H, bundle)
    d = layer.mix_dim if layer.blocks else 0
    if out_map is not None:
        d = out_map.shape[1]
    S = np.zeros((n, d))
    Q = np.zeros((n, d))
    C = np.diff(indptr).astype(np.float64)
    unit_count, unit_of, boundaries = _dest_unit_map(bundle, granularity, num_buckets)
    if makers:
        cal = layer.calib
        cal_unit = cal.unit_of(bundle) if cal is not None else None
        dst = edge_destinations(indptr)
        v = 0
        while v < n:
            hi = int(np.searchsorted(indptr, indptr[v] + chunk_edges, side="right")) - 1
            hi = min(max(hi, v + 1), n)
            sl = slice(indptr[v], indptr[hi])
            if sl.stop > sl.start:
                m = makers[0](sl)
                for mk in makers[1:]:
                    m = m + mk(sl)
                if cal is not None:
                    units = cal_unit[dst[sl]]
                    m = cal.a[units].astype(np.float64) * m + cal.b[units].astype(np.float64)
                if out_map is not None:
                    m = m @ out_map.astype(np.float64)
                lengths = np.diff(indptr[v:hi + 1])
                nonempty = np.flatnonzero(lengths > 0) + v
                if len(nonempty):
                    starts = indptr[nonempty] - indptr[v]
                    S[nonempty] += np.add.reduceat(m, starts, axis=0)
                    Q[nonempty] += np.add.reduceat(m * m, starts, axis=0)
            v = hi
    if granularity == "per_node":
        Su, Qu, Cu = S, Q, C
    else:
        Su = np.zeros((unit_count, d))
        Qu = np.zeros((unit_count, d))
        Cu = np.zeros(unit_count)
        np.add.at(Su, unit_of, S)
        np.add.at(Qu, unit_of, Q)
        np.add.at(Cu, unit_of, C)
    stats = CalibrationStats(granularity=granularity, layer=layer_index,
                             S=Su, Q=Qu, C=Cu, boundaries=boundaries)
    stats.check()
    return stats


def collect_layer_inputs(model: UmpmModel, bundle) -> list[np.ndarray]:
    """H^0 .. H^{L-1}: what each layer consumes during forward."""
    H = bundle.features
    inputs = [H]
    for i, layer in enumerate(model.layers[:-1]):
        U = layer_forward(layer, H, bundle)
        H = activation_fn(layer.activation)(U)
        inputs.append(H)
    return inputs


def stream_moments(model: UmpmModel, bundle, layer: int,
                   granularity: str = "per_node", num_buckets: int = 32,
                   out_map: np.ndarray | None = None) -> CalibrationStats:
    """Moments of layer `layer` (0-based) under the model's own forward."""
    inputs = collect_layer_inputs(model, bundle)
    return stream_layer_moments(
        model.layers[layer], inputs[layer], bundle,
        granularity=granularity, num_buckets=num_buckets,
        out_map=out_map, layer_index=layer,
    )


def mix_targets(stats_a: CalibrationStats | None, stats_b: CalibrationStats | None,
                alpha: float) -> TargetMoments:
    """Interpolate first and second moments, then derive the target sigma.

    A missing side (padding position) passes the present side through.
    """
    if stats_a is None and stats_b is None:
        raise ValidationError("no parent statistics to mix")
    if stats_a is None:
        stats_a, alpha = stats_b, 0.0
    if stats_b is None:
        stats_b = stats_a
        alpha = 1.0
    if stats_a.granularity != stats_b.granularity:
        raise ValidationError("parent statistics differ in granularity")
    if stats_a.S.shape != stats_b.S.shape:
        raise ValidationError("parent statistics differ in shape")
    mu = alpha * stats_a.mu + (1.0 - alpha) * stats_b.mu
    nu = alpha * stats_a.nu + (1.0 - alpha) * stats_b.nu
    var = np.maximum(nu - mu * mu, 0.0)
    return TargetMoments(granularity=stats_a.granularity, mu=mu, nu=nu,
                         sigma=np.sqrt(var))


def folded_params(child_stats: CalibrationStats, targets: TargetMoments,
                  eps: float = 1e-6) -> CalibrationParams:
    """a_v = sigma*_v / (sigma_v + eps), b_v = mu*_v - a_v mu_v.

    Units with at most one edge, channels with vanishing spread, and
    channels whose scale correction would explode (beyond 10x, where the
    eps guard dominates the quotient) fall back to mean-only calibration
    (a = 1, b = mu* - mu).
    """
    if child_stats.granularity != targets.granularity:
        raise ValidationError("stats and targets differ in granularity")
    sigma_c = child_stats.sigma
    mu_c = child_stats.mu
    a = targets.sigma / (sigma_c + eps)
    b = targets.mu - a * mu_c
    mean_only = (
        (child_stats.C <= 1)[:, None]
        | (sigma_c < ZERO_VAR_THRESHOLD)
        | (a > MAX_SCALE_CORRECTION)
    )
    a = np.where(mean_only, 1.0, a)
    b = np.where(mean_only, targets.mu - mu_c, b)
    no_edges = child_stats.C == 0
    a[no_edges] = 1.0
    b[no_edges] = 0.0
    full = ~mean_only & (child_stats.C > 0)[:, None]
    return CalibrationParams(
        a=a.astype(np.float32), b=b.astype(np.float32), eps=eps,
        granularity=child_stats.granularity,
        boundaries=child_stats.boundaries,
        mu_target=targets.mu, sigma_target=targets.sigma,
        full_affine=full,
    )


def apply_folded(model: UmpmModel, params: CalibrationParams, layer: int) -> UmpmModel:
    """Install the affine wrapper on layer `layer`'s edge aggregate.

    The layer's forward then computes a_v (x) S_v + C_v b_v in place of
    the raw aggregate; self blocks and the bias are untouched. Layers
    without active edge bases are left alone with a warning.
    """
    target = model.layers[layer]
    if isinstance(target, DualBranchLayer):
        raise ValidationError("dual layers are calibrated per branch")
    has_edge = any(
        b in target.blocks and target.gate(b) != 0.0 for b in EDGE_BASES
    )
    if not has_edge:
        logger.warning("layer %d has no active edge bases; calibration skipped", layer)
        return model
    target.calib = LayerCalibration(
        granularity=params.granularity,
        a=params.a,
        b=params.b,
        boundaries=np.asarray(params.boundaries, dtype=np.float64),
        eps=params.eps,
    )
    return model
