"""Layer matching between parent traces: CKA, monotone DP, Procrustes.

The DP maximizes dp[i,j] = S_ij + max(dp[i-1,j-1],
dp[i-1,j] - g*delta(i,j), dp[i,j-1] - g*delta(i,j)) with
delta(i,j) = |i/L_A - j/L_B|, the endpoints (0,0) and (L_A,L_B) pinned
as matches, and matches taken from the diagonal moves of the optimal
path. Each matched pair (i,j) then gets a rectangular Procrustes map
R = U V^T from the SVD of U_A^i^T U_B^j.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


def compute_cka(U_a: np.ndarray, U_b: np.ndarray) -> float:
    """Linear CKA between two representation matrices (same node count).

    Columns are centered first; the score is
    ||U_b^T U_a||_F^2 / (||U_a^T U_a||_F * ||U_b^T U_b||_F), which is 1
    for any orthogonal transform or nonzero isotropic rescaling of U_a.
    """
    if U_a.shape[0] != U_b.shape[0]:
        raise ValidationError("CKA inputs must share the node dimension")
    A = U_a.astype(np.float64) - U_a.mean(axis=0, dtype=np.float64)
    B = U_b.astype(np.float64) - U_b.mean(axis=0, dtype=np.float64)
    denom_a = np.linalg.norm(A.T @ A)
    denom_b = np.linalg.norm(B.T @ B)
    if denom_a == 0.0 or denom_b == 0.0:
        warnings.warn("zero-variance input to CKA; similarity defined as 0")
        return 0.0
    return float(np.linalg.norm(B.T @ A) ** 2 / (denom_a * denom_b))


def gap_delta(i: int, j: int, depth_a: int, depth_b: int) -> float:
    return abs(i / depth_a - j / depth_b)


def monotone_align(S: np.ndarray, gamma: float) -> list[tuple[int, int]]:
    """Anchored monotone layer matching via DP with gap penalties.

    Returns the ordered diagonal-move matches of the optimal path; the
    endpoints are always matched (the final move is constrained to be
    diagonal). Ties prefer diagonal, then the A-side advance, then the
    B-side advance.
    """
    if not np.all(np.isfinite(S)):
        raise ValidationError("similarity matrix must be finite")
    if gamma <= 0:
        raise ValidationError("gap penalty must be positive")
    la, lb = S.shape[0] - 1, S.shape[1] - 1
    dp = np.full(S.shape, -np.inf)
    move = np.zeros(S.shape, dtype=np.int8)   # 0 diag, 1 up (i-1), 2 left (j-1)
    dp[0, 0] = S[0, 0]
    for i in range(la + 1):
        for j in range(lb + 1):
            if i == 0 and j == 0:
                continue
            pen = gamma * gap_delta(i, j, la, lb)
            if i == la and j == lb:
                candidates = [(dp[i - 1, j - 1], 0)]
            else:
                candidates = []
                if i > 0 and j > 0:
                    candidates.append((dp[i - 1, j - 1], 0))
                if i > 0:
                    candidates.append((dp[i - 1, j] - pen, 1))
                if j > 0:
                    candidates.append((dp[i, j - 1] - pen, 2))
            best = max(candidates, key=lambda t: (t[0], -t[1]))
            dp[i, j] = S[i, j] + best[0]
            move[i, j] = best[1]
    matches = []
    i, j = la, lb
    while (i, j) != (0, 0):
        m = move[i, j]
        if m == 0:
            matches.append((i, j))
            i, j = i - 1, j - 1
        elif m == 1:
            i -= 1
        else:
            j -= 1
    matches.append((0, 0))
    return matches[::-1]


@dataclass(frozen=True)
class TransportMap:
    """Semi-orthogonal map R between matched layer spaces.

    Tall (d_i >= d_j) maps satisfy R^T R = I_{d_j}; wide ones
    R R^T = I_{d_i}.
    """

    R: np.ndarray
    src_layer: int
    dst_layer: int

    @property
    def orientation(self) -> str:
        return "tall" if self.R.shape[0] >= self.R.shape[1] else "wide"


def _polar(M: np.ndarray, rank_tol: float = 1e-7) -> np.ndarray:
    """U V^T from the thin SVD, with a deterministic sign convention
    (each left singular vector's first nonzero component positive).

    Directions whose singular value falls below rank_tol * s_max carry no
    signal, and LAPACK's U/V bases there are arbitrary noise; the map is
    completed on those subspaces by the feasible completion closest to
    the identity, keeping self-alignment an exact no-op.
    """
    U, s, Vh = np.linalg.svd(M, full_matrices=False)
    for k in range(U.shape[1]):
        col = U[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if len(nz) and col[nz[0]] < 0:
            U[:, k] = -col
            Vh[k, :] = -Vh[k, :]
    cutoff = rank_tol * (s[0] if len(s) and s[0] > 0 else 1.0)
    r = int(np.sum(s > cutoff))
    if r == len(s):
        return U @ Vh
    U_r, V_r = U[:, :r], Vh[:r, :].T
    U_c = _null_basis(U_r, M.shape[0])
    V_c = _null_basis(V_r, M.shape[1])
    if M.shape[0] == M.shape[1]:
        # identity-closest completion between matching null spaces
        Uq, _, Vqh = np.linalg.svd(U_c.T @ V_c, full_matrices=False)
        return U_r @ V_r.T + U_c @ (Uq @ Vqh) @ V_c.T
    k = min(M.shape) - r
    return U_r @ V_r.T + U_c[:, :k] @ V_c[:, :k].T


def _null_basis(cols: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal complement of the given orthonormal columns in R^n."""
    r = cols.shape[1]
    if r == 0:
        return np.eye(n)
    Qf, _ = np.linalg.qr(
        np.concatenate([cols, np.eye(n)], axis=1), mode="reduced"
    )
    return Qf[:, r:n]


def _refine_tall(A: np.ndarray, M: np.ndarray, R0: np.ndarray,
                 iters: int, extra_starts: int) -> np.ndarray:
    """Majorization descent for min tr(R^T A R) - 2 tr(R^T M), R^T R = I.

    In the strictly tall case the quadratic term varies over the
    constraint set, so U V^T of the cross-covariance is only a starting
    point. Each sweep majorizes the quadratic term at the current
    iterate via lam = lambda_max(A) and re-polarizes; a few seeded extra
    starts guard against local basins.
    """
    lam = float(np.linalg.eigvalsh(A)[-1])

    def objective(R):
        return float(np.sum(R * (A @ R)) - 2.0 * np.sum(R * M))

    def descend(R):
        prev = objective(R)
        for _ in range(iters):
            R = _polar(M + (lam * np.eye(A.shape[0]) - A) @ R)
            cur = objective(R)
            if prev - cur <= 1e-12 * max(1.0, abs(prev)):
                break
            prev = cur
        return R, objective(R)

    best_R, best_obj = descend(R0)
    rng = np.random.default_rng(0)
    for _ in range(extra_starts):
        Q, _ = np.linalg.qr(rng.standard_normal(R0.shape))
        R, obj = descend(Q)
        if obj < best_obj - 1e-12:
            best_R, best_obj = R, obj
    return best_R


def procrustes(U_a: np.ndarray, U_b: np.ndarray,
               src_layer: int = -1, dst_layer: int = -1,
               refine_iters: int = 200, extra_starts: int = 8) -> TransportMap:
    """Rectangular Procrustes: argmin_R ||U_a R - U_b||_F under the
    orientation-appropriate semi-orthogonality constraint.

    R = U V^T from the thin SVD of U_a^T U_b solves the wide and square
    cases exactly (there tr(R^T U_a^T U_a R) is constant on the
    constraint set). Strictly tall maps additionally run a short
    majorization refinement from that initialization.
    """
    if U_a.shape[0] != U_b.shape[0]:
        raise ValidationError("Procrustes inputs must share the node dimension")
    Ua = U_a.astype(np.float64)
    Ub = U_b.astype(np.float64)
    M = Ua.T @ Ub
    R = _polar(M)
    if M.shape[0] > M.shape[1] and refine_iters > 0:
        R = _refine_tall(Ua.T @ Ua, M, R, refine_iters, extra_starts)
    return TransportMap(R=R, src_layer=src_layer, dst_layer=dst_layer)


@dataclass
class AlignmentPlan:
    """CKA matrix, matched pairs, gap penalty, and per-pair transport maps."""

    S: np.ndarray
    matches: list[tuple[int, int]]
    gamma: float
    maps: dict[tuple[int, int], TransportMap] = field(default_factory=dict)

    def validate(self) -> None:
        la, lb = self.S.shape[0] - 1, self.S.shape[1] - 1
        if (0, 0) not in self.matches or (la, lb) not in self.matches:
            raise ValidationError("anchors missing from the match set")
        for k in range(len(self.matches) - 1):
            (i1, j1), (i2, j2) = self.matches[k], self.matches[k + 1]
            if not (i2 > i1 and j2 > j1):
                raise ValidationError("matches must strictly increase in both coords")


def node_subsample(num_nodes: int, cap: int = 20000, seed: int = 0) -> np.ndarray | None:
    """Seeded uniform subsample shared by all layer pairs; None = use all."""
    if num_nodes <= cap:
        return None
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(num_nodes, size=cap, replace=False))


def compute_plan(trace_a, trace_b, gamma: float = 0.5,
                 subsample: np.ndarray | None = None) -> AlignmentPlan:
    """Full Phase-2 alignment from two pre-activation traces."""
    Ua = [u if subsample is None else u[subsample] for u in trace_a.U]
    Ub = [u if subsample is None else u[subsample] for u in trace_b.U]
    S = np.zeros((len(Ua), len(Ub)))
    for i, ua in enumerate(Ua):
        for j, ub in enumerate(Ub):
            S[i, j] = compute_cka(ua, ub)
    matches = monotone_align(S, gamma)
    maps = {
        (i, j): procrustes(Ua[i], Ub[j], src_layer=i, dst_layer=j)
        for i, j in matches
    }
    plan = AlignmentPlan(S=S, matches=matches, gamma=gamma, maps=maps)
    plan.validate()
    return plan
