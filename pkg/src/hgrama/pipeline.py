"""End-to-end merge: canonicalize, align, transport, fuse, calibrate.

The merge path receives a label-free bundle view and never touches
labels or training masks; the view counts restricted reads and the
result records the audit. Every emitted artifact embeds the RunConfig
that produced it.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .alignment import compute_plan, node_subsample
from .errors import NumericalError, ValidationError
from .fusion import (
    FusionConfig,
    conf_risk_alpha,
    fuse_layers,
    gate_regress,
    recon_alpha,
    shared_design,
)
from .graph_store import GraphBundle, LabelFreeView
from .lfnorm import (
    apply_folded,
    collect_layer_inputs,
    folded_params,
    mix_targets,
    stream_layer_moments,
    stream_moments,
)
from .model_zoo import ParentModel, activation_fn, forward as parent_forward
from .transport import aligned_traces, build_layout, pad_depth, transport_model
from .umpm import (
    DualBranchLayer,
    UmpmModel,
    apply_basis,
    canonicalize,
    umpm_forward,
    verify_equivalence,
)

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    gamma: float = 0.5
    ridge_lambda: float = 1e-4
    whiten: bool = True
    top_k: int | None = None
    alpha_mode: str = "conf_risk"       # conf_risk | recon | fixed
    fixed_alpha: float | None = None
    eps: float = 1e-8
    w_pad: float = 0.5
    gate_regress: bool = True
    transport: bool = True
    lfnorm_layers: str = "last"         # all | last | none
    lfnorm_granularity: str = "auto"    # per_node | bucket:K | global | auto
    lfnorm_eps: float = 1e-6
    seed: int = 0
    subsample_cap: int = 20000
    swap_canonical: bool = False
    verify_eps: float = 1e-5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def fusion_config(self) -> FusionConfig:
        cfg = FusionConfig(
            ridge_lambda=self.ridge_lambda,
            whiten=self.whiten,
            top_k=self.top_k,
            alpha_mode=self.alpha_mode,
            fixed_alpha=self.fixed_alpha,
            eps=self.eps,
            w_pad=self.w_pad,
            gate_regress=self.gate_regress,
        )
        cfg.validate()
        return cfg

    def resolve_granularity(self, num_nodes: int) -> tuple[str, int]:
        g = self.lfnorm_granularity
        if g == "auto":
            return ("per_node", 0) if num_nodes <= 20000 else ("bucket", 32)
        if g == "per_node":
            return "per_node", 0
        if g == "global":
            return "global", 0
        if g.startswith("bucket"):
            parts = g.split(":")
            return "bucket", int(parts[1]) if len(parts) > 1 else 32
        raise ValidationError(f"unknown lfnorm granularity {g!r}")


@dataclass
class MergeResult:
    child: UmpmModel
    report: dict
    view: LabelFreeView | None = None
    calibrations: list = field(default_factory=list)   # (layer, tag, CalibrationParams)


def _phase(tag: str):
    """Re-raise engine errors with a phase tag for diagnostics."""
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not getattr(exc, "_phase_tagged", False):
                exc.args = (f"[{tag}] {exc}",) + exc.args[1:]
                exc._phase_tagged = True
            return False
    return _Ctx()


def _identityize_layout(layout):
    for tm in layout.maps:
        if tm.R.shape[0] != tm.R.shape[1]:
            raise ValidationError(
                "transport disabled but matched layer widths differ "
                f"({tm.R.shape[0]} vs {tm.R.shape[1]})"
            )
    for tm in layout.maps:
        tm.R[...] = np.eye(tm.R.shape[0])
    return layout


def _design_states(layout, trace_a, trace_b, act_a: str, act_b: str, features):
    """What each child layer would consume from either parent: the
    transported post-activation of A and the post-activation of B."""
    phi_a = activation_fn(act_a)
    phi_b = activation_fn(act_b)
    h_a, h_b = [features], [features]
    for l in range(1, layout.depth):
        ua = trace_a.U[layout.aidx[l]]
        h_a.append((phi_a(ua).astype(np.float64) @ layout.maps[l].R).astype(np.float32))
        h_b.append(phi_b(trace_b.U[layout.bidx[l]]))
    return h_a, h_b


def run_merge_pipeline(parent_a: ParentModel, parent_b: ParentModel,
                       bundle: GraphBundle, config: RunConfig | None = None) -> MergeResult:
    """Execute the five merge phases under the given configuration."""
    config = config or RunConfig()
    fcfg = config.fusion_config()
    if config.swap_canonical:
        parent_a, parent_b = parent_b, parent_a
    view = bundle.label_free_view()
    report: dict = {"config": config.to_dict(), "phases": {}}

    # Phase 1: canonicalization (and lossless-embedding verification)
    with _phase("canonicalize"):
        canon_a = canonicalize(parent_a)
        canon_b = canonicalize(parent_b)
        dev_a = verify_equivalence(parent_a, canon_a, view, eps=config.verify_eps)
        dev_b = verify_equivalence(parent_b, canon_b, view, eps=config.verify_eps)
        if max(dev_a, dev_b) > config.verify_eps:
            raise NumericalError(
                f"canonicalization deviates beyond {config.verify_eps}: "
                f"A={dev_a:.3g}, B={dev_b:.3g}"
            )
    report["phases"]["canonicalize"] = {
        "deviation_a": dev_a, "deviation_b": dev_b, "eps": config.verify_eps,
    }

    # Phase 2: trace extraction and alignment
    with _phase("align"):
        trace_a = parent_forward(parent_a, view)
        trace_b = parent_forward(parent_b, view)
        subsample = node_subsample(view.num_nodes, cap=config.subsample_cap,
                                   seed=config.seed)
        plan = compute_plan(trace_a, trace_b, gamma=config.gamma, subsample=subsample)
    report["phases"]["align"] = {
        "cka": plan.S.tolist(),
        "matches": [list(m) for m in plan.matches],
        "gamma": config.gamma,
        "subsampled_nodes": None if subsample is None else len(subsample),
    }

    # Phase 3: coordinate transport and depth padding
    with _phase("transport"):
        layout = build_layout(plan, trace_a, trace_b, subsample)
        if not config.transport:
            layout = _identityize_layout(layout)
            transported = transport_model(canon_a, canon_b, layout, None, None)
        else:
            transported = transport_model(canon_a, canon_b, layout, trace_a, trace_b,
                                          subsample)
        a_model, b_model = pad_depth(transported, canon_b, plan.matches)
        ua, ub = aligned_traces(layout, trace_a, trace_b)
    report["phases"]["transport"] = {
        "depth": layout.depth,
        "a_padding": transported.padding_positions,
        "b_padding": [l - 1 for l in layout.b_pads()],
        "aidx": layout.aidx,
        "bidx": layout.bidx,
        "enabled": config.transport,
    }

    # Phase 4: operator fusion
    with _phase("fuse"):
        h_a, h_b = _design_states(layout, trace_a, trace_b,
                                  parent_a.activation, parent_b.activation,
                                  view.features)
        child_layers = []
        fusion_rows = []
        alphas = []
        for l in range(1, layout.depth + 1):
            la = a_model.layers[l - 1]
            lb = b_model.layers[l - 1]
            a_pad = la.is_padding
            b_pad = lb.is_padding
            if config.alpha_mode == "fixed":
                alpha = float(config.fixed_alpha)
            elif config.alpha_mode == "recon":
                target = shared_design(ua[l], ub[l])
                alpha = recon_alpha(ua[l], ub[l], target, eps=config.eps,
                                    a_is_padding=a_pad, b_is_padding=b_pad,
                                    w_pad=config.w_pad)
            else:
                rep = conf_risk_alpha(ua[l], ub[l], trace_a.logits, trace_b.logits,
                                      eps=config.eps)
                alpha = rep.alpha
            fused = fuse_layers(la, lb, alpha)
            residual = None
            if (
                fcfg.gate_regress
                and isinstance(fused, DualBranchLayer) is False
                and not fused.post_mlp
                and fused.blocks
            ):
                design = shared_design(h_a[l - 1], h_b[l - 1])
                columns = {
                    name: apply_basis(name, design, fused, view)
                    for name in fused.blocks
                }
                target = shared_design(ua[l], ub[l])
                if fused.bias is not None:
                    target = target - fused.bias
                res = gate_regress(columns, target, fcfg)
                fused.gates = dict(res.gates)
                residual = res.residual
            alphas.append(alpha)
            child_layers.append(fused)
            fusion_rows.append({
                "layer": l - 1,
                "alpha": alpha,
                "dual": isinstance(fused, DualBranchLayer),
                "gates": (
                    {f"a.{k}": v for k, v in fused.branch_a.gates.items()}
                    | {f"b.{k}": v for k, v in fused.branch_b.gates.items()}
                    if isinstance(fused, DualBranchLayer) else dict(fused.gates)
                ),
                "regression_residual": residual,
                "a_padding": a_pad,
                "b_padding": b_pad,
            })
        child = UmpmModel(
            layers=child_layers,
            provenance=f"merge:{parent_a.arch}+{parent_b.arch}",
        )
        child.validate()
    report["phases"]["fuse"] = {"layers": fusion_rows, "alpha_mode": config.alpha_mode}

    # Phase 5: LFNorm calibration
    lf_rows = []
    calibrations: list = []
    if config.lfnorm_layers != "none":
        with _phase("lfnorm"):
            granularity, buckets = config.resolve_granularity(view.num_nodes)
            targets_idx = (
                [layout.depth - 1] if config.lfnorm_layers == "last"
                else list(range(layout.depth))
            )
            for c in targets_idx:
                stats_a = None
                stats_b = None
                if layout.aidx[c + 1] != layout.aidx[c]:
                    r_a = layout.maps[c + 1].R
                    a_idx = layout.aidx[c + 1] - 1
                    if canon_a.layers[a_idx].post_mlp:
                        r_a = layout.maps[c].R
                    stats_a = stream_moments(canon_a, view, a_idx,
                                             granularity=granularity,
                                             num_buckets=buckets, out_map=r_a)
                if layout.bidx[c + 1] != layout.bidx[c]:
                    stats_b = stream_moments(canon_b, view, layout.bidx[c + 1] - 1,
                                             granularity=granularity,
                                             num_buckets=buckets)
                row = _calibrate_child_layer(child, view, c, alphas[c],
                                             stats_a, stats_b,
                                             granularity, buckets, config.lfnorm_eps,
                                             calibrations)
                lf_rows.append(row)
    report["phases"]["lfnorm"] = {
        "layers": lf_rows,
        "mode": config.lfnorm_layers,
        "granularity": config.lfnorm_granularity,
    }

    report["label_audit"] = {
        "label_reads": view.label_reads,
        "train_mask_reads": view.train_mask_reads,
    }
    return MergeResult(child=child, report=report, view=view,
                       calibrations=calibrations)


def _calibrate_child_layer(child: UmpmModel, view, c: int, alpha: float,
                           stats_a, stats_b, granularity: str, buckets: int,
                           eps: float, calibrations: list | None = None) -> dict:
    """Stream the child's realized moments at layer c and fold the affine
    correction in; dual layers calibrate each branch against its own
    parent's statistics."""
    inputs = collect_layer_inputs(child, view)
    layer = child.layers[c]
    row = {"layer": c, "granularity": granularity, "applied": False}
    if isinstance(layer, DualBranchLayer):
        for branch, stats in (("branch_a", stats_a), ("branch_b", stats_b)):
            b_layer = getattr(layer, branch)
            if stats is None or b_layer.is_padding:
                continue
            if stats.S.shape[1] != b_layer.mix_dim:
                logger.warning("layer %d %s: stat width %d != mixture width %d; skipped",
                               c, branch, stats.S.shape[1], b_layer.mix_dim)
                continue
            child_stats = stream_layer_moments(
                b_layer, inputs[c], view,
                granularity=granularity, num_buckets=buckets, layer_index=c)
            if not np.any(child_stats.C > 0):
                continue
            targets = mix_targets(stats, stats, 1.0)
            params = folded_params(child_stats, targets, eps=eps)
            b_layer.calib = None
            apply_branch = UmpmModel(layers=[b_layer])
            apply_folded(apply_branch, params, 0)
            if calibrations is not None:
                calibrations.append((c, branch, params))
            row["applied"] = True
        return row
    if stats_a is None and stats_b is None:
        return row
    child_stats = stream_layer_moments(
        layer, inputs[c], view,
        granularity=granularity, num_buckets=buckets, layer_index=c)
    if not np.any(child_stats.C > 0):
        return row
    mixable = (
        stats_a is not None and stats_b is not None
        and stats_a.S.shape == stats_b.S.shape == child_stats.S.shape
    )
    if mixable:
        targets = mix_targets(stats_a, stats_b, alpha)
    else:
        side = stats_a if stats_b is None else stats_b
        if stats_a is not None and stats_b is not None:
            side = stats_b   # prefer the canonical coordinate side on width clash
        if side is None or side.S.shape != child_stats.S.shape:
            logger.warning("layer %d: no width-compatible parent stats; skipped", c)
            return row
        targets = mix_targets(side, side, 1.0)
    params = folded_params(child_stats, targets, eps=eps)
    apply_folded(child, params, c)
    if calibrations is not None and child.layers[c].calib is not None:
        calibrations.append((c, "mixture", params))
    row["applied"] = child.layers[c].calib is not None
    return row
