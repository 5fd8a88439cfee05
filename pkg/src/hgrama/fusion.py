"""Operator fusion: shared design state, closed-form gate regression,
label-free mixing coefficients, and convex parameter fusion.

The mixing coefficient alpha_l weighs the transported parent A against
parent B per layer. Confidence-risk mode aggregates per-node softmax
margins against per-node pre-activation discrepancies; reconstruction
mode projects a target trace onto the interpolation segment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .umpm import BASIS, DualBranchLayer, UmpmLayer

logger = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    ridge_lambda: float = 1e-4
    whiten: bool = True
    top_k: int | None = None
    alpha_mode: str = "conf_risk"      # conf_risk | recon | fixed
    fixed_alpha: float | None = None
    eps: float = 1e-8
    w_pad: float = 0.5
    gate_regress: bool = True

    def validate(self) -> None:
        if self.ridge_lambda < 0:
            raise ValidationError("ridge strength must be >= 0")
        if self.top_k is not None and self.top_k > len(BASIS):
            raise ValidationError("top_k exceeds the basis size")
        if self.alpha_mode not in ("conf_risk", "recon", "fixed"):
            raise ValidationError(f"unknown alpha mode {self.alpha_mode!r}")
        if self.alpha_mode == "fixed":
            if self.fixed_alpha is None or not (0.0 <= self.fixed_alpha <= 1.0):
                raise ValidationError("fixed alpha must lie in [0, 1]")


def shared_design(h_a: np.ndarray, h_b: np.ndarray) -> np.ndarray:
    """Symmetric blend of transported parent activations: 0.5 (H~_A + H_B)."""
    if h_a.shape != h_b.shape:
        raise ValidationError(f"design inputs differ in shape: {h_a.shape} vs {h_b.shape}")
    return np.float32(0.5) * (h_a + h_b)


@dataclass
class GateRegressionResult:
    gates: dict[str, float]
    residual: float
    basis_names: list[str] = field(default_factory=list)


def gate_regress(basis_outputs: dict[str, np.ndarray], target: np.ndarray,
                 config: FusionConfig) -> GateRegressionResult:
    """Ridge regression of the target onto the basis outputs.

    Solves (B^T B + lambda I) g = B^T vec(u) via the |basis| x |basis|
    normal equations; the stacked design matrix is never materialized.
    Whitening rescales columns to unit RMS before the solve (gates are
    un-whitened afterwards). With top-k set, the largest-|g| bases are
    kept and the restricted system re-solved; dropped gates are exact
    zeros.
    """
    names = [b for b in BASIS if b in basis_outputs]
    if not names:
        raise ValidationError("no basis outputs to regress on")
    count = float(target.size)
    cols = [basis_outputs[b].astype(np.float64).reshape(-1) for b in names]
    u = target.astype(np.float64).reshape(-1)

    def solve(active: list[int]) -> np.ndarray:
        G = np.empty((len(active), len(active)))
        rhs = np.empty(len(active))
        for a, ia in enumerate(active):
            rhs[a] = cols[ia] @ u
            for b, ib in enumerate(active[: a + 1]):
                G[a, b] = G[b, a] = cols[ia] @ cols[ib]
        scale = np.ones(len(active))
        if config.whiten:
            scale = np.sqrt(np.maximum(np.diag(G) / count, 1e-30))
            G = G / scale[:, None] / scale[None, :]
            rhs = rhs / scale
        A = G + config.ridge_lambda * np.eye(len(active))
        if config.ridge_lambda == 0.0 and (
            not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e12
        ):
            raise NumericalError(
                "normal matrix is singular at lambda = 0; rerun with lambda > 0"
            )
        try:
            g = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "normal matrix is singular at lambda = 0; rerun with lambda > 0"
            ) from exc
        return g / scale

    active = list(range(len(names)))
    g = solve(active)
    if config.top_k is not None and config.top_k < len(active):
        keep = np.argsort(-np.abs(g))[: config.top_k]
        active = sorted(int(k) for k in keep)
        g_restricted = solve(active)
        full = np.zeros(len(names))
        for slot, ia in enumerate(active):
            full[ia] = g_restricted[slot]
        g = full
    fit = np.zeros_like(u)
    for gi, col in zip(g, cols):
        fit += gi * col
    residual = float(np.linalg.norm(u - fit))
    return GateRegressionResult(
        gates={n: float(gi) for n, gi in zip(names, g)},
        residual=residual,
        basis_names=names,
    )


# ---------------------------------------------------------------------------
# Label-free mixing coefficients
# ---------------------------------------------------------------------------

def softmax_margin(logits: np.ndarray) -> np.ndarray:
    """Per-node top-1 vs top-2 softmax probability margin."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    if p.shape[1] < 2:
        return np.ones(p.shape[0])
    part = np.partition(p, -2, axis=1)
    return part[:, -1] - part[:, -2]


@dataclass
class AlphaReport:
    alpha: float
    score_a: float
    score_b: float
    conf_a: np.ndarray | None = None
    conf_b: np.ndarray | None = None
    discrepancy: np.ndarray | None = None


def conf_risk_alpha(u_tilde_a: np.ndarray, u_b: np.ndarray,
                    logits_a: np.ndarray, logits_b: np.ndarray,
                    eps: float = 1e-8) -> AlphaReport:
    """Confidence-weighted discrepancy scores and the proportional alpha.

    d(v) = ||U_B(v) - U~_A(v)||^2 / d_l; per-node margins are normalized
    pairwise, s_P = sum_v c^_P(v) d(v), and
    alpha = s_A / (s_A + s_B + eps) clipped to [0, 1].
    """
    if u_tilde_a.shape != u_b.shape:
        raise ValidationError("aligned traces must share shapes")
    d_l = u_b.shape[1]
    diff = (u_b.astype(np.float64) - u_tilde_a.astype(np.float64))
    disc = (diff * diff).sum(axis=1) / d_l
    c_a = softmax_margin(logits_a)
    c_b = softmax_margin(logits_b)
    denom = c_a + c_b + eps
    ca_hat = c_a / denom
    cb_hat = c_b / denom
    s_a = float((ca_hat * disc).sum())
    s_b = float((cb_hat * disc).sum())
    alpha = float(np.clip(s_a / (s_a + s_b + eps), 0.0, 1.0))
    return AlphaReport(alpha=alpha, score_a=s_a, score_b=s_b,
                       conf_a=ca_hat, conf_b=cb_hat, discrepancy=disc)


def recon_alpha(u_tilde_a: np.ndarray, u_b: np.ndarray, u_target: np.ndarray,
                eps: float = 1e-8, a_is_padding: bool = False,
                b_is_padding: bool = False, w_pad: float = 0.5) -> float:
    """Projection of the target onto the interpolation segment, clipped.

    alpha = clip(<U~_A - U_B, U_tgt - U_B> / (||U~_A - U_B||^2 + eps));
    a padding side's share is downweighted by w_pad.
    """
    da = (u_tilde_a.astype(np.float64) - u_b.astype(np.float64)).reshape(-1)
    dt = (u_target.astype(np.float64) - u_b.astype(np.float64)).reshape(-1)
    alpha = float(np.clip((da @ dt) / (da @ da + eps), 0.0, 1.0))
    if a_is_padding:
        alpha = w_pad * alpha
    if b_is_padding:
        alpha = 1.0 - w_pad * (1.0 - alpha)
    return float(np.clip(alpha, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Convex parameter fusion
# ---------------------------------------------------------------------------

def _same_shape_mlp(a, b) -> bool:
    return (
        a is not None and b is not None and len(a) == len(b)
        and all(wa.shape == wb.shape for (wa, _), (wb, _) in zip(a, b))
    )


def _mixable_att(layer_a: UmpmLayer, layer_b: UmpmLayer) -> bool:
    if layer_a.att is None or layer_b.att is None:
        return False
    if "att" not in layer_a.blocks or "att" not in layer_b.blocks:
        return False
    return (
        layer_a.blocks["att"].shape == layer_b.blocks["att"].shape
        and layer_a.att.a_src.shape == layer_b.att.a_src.shape
        and layer_a.att.concat == layer_b.att.concat
    )


def _convex(x_a: np.ndarray | None, x_b: np.ndarray | None, alpha: float):
    """alpha x_a + (1 - alpha) x_b with missing sides treated as zeros."""
    a32 = np.float32(alpha)
    if x_a is None and x_b is None:
        return None
    if x_a is None:
        return ((np.float32(1.0) - a32) * x_b).astype(np.float32)
    if x_b is None:
        return (a32 * x_a).astype(np.float32)
    if x_a.shape != x_b.shape:
        raise ValidationError(f"cannot mix tensors shaped {x_a.shape} and {x_b.shape}")
    return (a32 * x_a + (np.float32(1.0) - a32) * x_b).astype(np.float32)


def fuse_layers(layer_a: UmpmLayer, layer_b: UmpmLayer, alpha: float):
    """Convex fusion of two depth-aligned layers in B-space.

    Basis blocks mix as effective operators (gate-weighted), so a basis
    carried by one parent scales linearly in its side's coefficient.
    Attention score vectors mix element-wise only when both parents
    carry compatible heads; otherwise parent B's attention function is
    inherited and only the gate keeps the alpha scaling. Layers where
    exactly one side carries a post-update MLP cannot be merged into a
    single mixture and fuse at the function level instead.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValidationError("alpha must lie in [0, 1]")
    activation = layer_a.activation if alpha > 0.5 else layer_b.activation
    if activation == "linear":
        activation = layer_b.activation if alpha > 0.5 else layer_a.activation
    psi_compatible = (
        (layer_a.post_mlp is None and layer_b.post_mlp is None)
        or _same_shape_mlp(layer_a.post_mlp, layer_b.post_mlp)
    )
    if not psi_compatible:
        return DualBranchLayer(
            branch_a=layer_a, branch_b=layer_b, mix=float(alpha),
            activation=activation,
        )

    blocks: dict[str, np.ndarray] = {}
    gates: dict[str, float] = {}
    att_params = None
    mix_att = _mixable_att(layer_a, layer_b)
    for name in BASIS:
        in_a = name in layer_a.blocks
        in_b = name in layer_b.blocks
        if not in_a and not in_b:
            continue
        if name == "att" and not mix_att:
            # Attention scores sit inside a softmax, so a lone carrier's
            # function is inherited intact; only its gate keeps the
            # convex scaling.
            carrier, coeff = (layer_b, 1.0 - alpha) if in_b else (layer_a, alpha)
            if in_a and in_b:
                logger.info("attention geometries differ; inheriting parent B's attention")
            g = coeff * carrier.gate("att")
            if g != 0.0:
                blocks["att"] = carrier.blocks["att"].copy()
                gates["att"] = float(g)
                att_params = carrier.att
            continue
        g_a = layer_a.gate(name) if in_a else 0.0
        g_b = layer_b.gate(name) if in_b else 0.0
        w_a = layer_a.blocks.get(name)
        w_b = layer_b.blocks.get(name)
        # Mix effective operators g W; the stored gate is the mixed gate
        # and the block absorbs the rest, avoiding a quadratic alpha on
        # one-sided bases.
        g_mix = alpha * g_a + (1.0 - alpha) * g_b
        eff = _convex(
            None if w_a is None else np.float32(g_a) * w_a,
            None if w_b is None else np.float32(g_b) * w_b,
            alpha,
        )
        if g_mix != 0.0:
            blocks[name] = (eff.astype(np.float64) / g_mix).astype(np.float32)
            gates[name] = float(g_mix)
        elif eff is not None and np.any(eff):
            blocks[name] = eff
            gates[name] = 1.0
        if name == "att" and "att" in blocks:
            att_params = _mix_att_params(layer_a.att, layer_b.att, alpha)

    bias = _convex(layer_a.bias, layer_b.bias, alpha)
    bb_names = set(layer_a.block_biases) | set(layer_b.block_biases)
    block_biases = {
        n: _convex(layer_a.block_biases.get(n), layer_b.block_biases.get(n), alpha)
        for n in bb_names
    }
    post_mlp = None
    if layer_a.post_mlp is not None:
        post_mlp = [
            (_convex(wa, wb, alpha), _convex(ba, bb, alpha))
            for (wa, ba), (wb, bb) in zip(layer_a.post_mlp, layer_b.post_mlp)
        ]
    child = UmpmLayer(
        blocks=blocks,
        gates=gates,
        bias=bias,
        block_biases=block_biases,
        att=att_params,
        post_mlp=post_mlp,
        activation=activation,
        is_padding=layer_a.is_padding and layer_b.is_padding,
    )
    child.validate()
    return child


def _mix_att_params(att_a, att_b, alpha: float):
    from .umpm import AttParams

    return AttParams(
        a_src=_convex(att_a.a_src, att_b.a_src, alpha),
        a_dst=_convex(att_a.a_dst, att_b.a_dst, alpha),
        leaky_slope=float(alpha * att_a.leaky_slope + (1 - alpha) * att_b.leaky_slope),
        concat=att_b.concat,
    )