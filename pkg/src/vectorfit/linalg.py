"""Thin SVD by one-sided Jacobi rotations, plus spectral utilities."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, DimensionError, NumericalError, ValidationError

MAX_SWEEPS = 100
OFFDIAG_TOL = 1e-12
# pairs are still rotated below the stopping threshold so the final sweep
# leaves columns orthogonal to working precision rather than to OFFDIAG_TOL
ROTATE_TOL = float(np.finfo(np.float64).eps)


@dataclass
class SVDFactors:
    """``W = U @ diag(sigma) @ V.T`` with ``U`` (d_r x r), ``V`` (d_c x r), r = min(d_r, d_c)."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank_dim(self) -> int:
        return self.sigma.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule: n-1 rounds (n even) of n/2 disjoint column pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of a tall ``A`` (m >= n). Returns (G, V) with A V = G."""
    # rows of Gt/Vt are the columns being rotated; row access is contiguous
    Gt = np.ascontiguousarray(A.T)
    n = Gt.shape[0]
    Vt = np.eye(n, dtype=Gt.dtype)
    if n == 1:
        return Gt.T, Vt.T
    rounds = _round_robin(n)
    worst = np.inf
    for _ in range(MAX_SWEEPS):
        worst = 0.0
        for p, q in rounds:
            if p.size == 0:
                continue
            Gp, Gq = Gt[p], Gt[q]
            alpha = np.einsum("ij,ij->i", Gp, Gp)
            beta = np.einsum("ij,ij->i", Gq, Gq)
            gamma = np.einsum("ij,ij->i", Gp, Gq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            worst = max(worst, float(ratio.max()))
            act = ratio > ROTATE_TOL
            if not act.any():
                continue
            if not act.all():
                p, q = p[act], q[act]
                Gp, Gq = Gp[act], Gq[act]
                alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            Gt[p] = c * Gp - s * Gq
            Gt[q] = s * Gp + c * Gq
            Vp, Vq = Vt[p], Vt[q]
            Vt[p] = c * Vp - s * Vq
            Vt[q] = s * Vp + c * Vq
        if worst <= OFFDIAG_TOL:
            return Gt.T, Vt.T
    raise NumericalError(
        f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (max relative off-diagonal {worst:.3e})"
    )


def _complete_basis(U: np.ndarray, missing: np.ndarray) -> None:
    """Fill the columns of ``U`` flagged by ``missing`` with an orthonormal completion."""
    m = U.shape[0]
    have = [j for j in range(U.shape[1]) if not missing[j]]
    basis = U[:, have]
    for j in np.flatnonzero(missing):
        best, best_norm = None, -1.0
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            for _ in range(2):
                cand -= basis @ (basis.T @ cand)
            nrm = np.linalg.norm(cand)
            if nrm > best_norm + 1e-12:
                best, best_norm = cand, nrm
            if best_norm > 0.5:
                break
        U[:, j] = best / best_norm
        basis = np.column_stack([basis, U[:, j]])


def svd_thin(W) -> SVDFactors:
    """Thin SVD of a d_r x d_c matrix.

    Works in float64 on the thinner orientation and returns factors in the
    input's float width. Each ``U`` column is sign-flipped so its
    largest-magnitude entry is positive; ``V`` absorbs the flip. Equal
    singular values keep factorization order.
    """
    W = np.asarray(W)
    if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 1:
        raise ValidationError(f"svd_thin needs a non-empty matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValidationError("svd_thin: matrix has non-finite entries")
    out_dtype = W.dtype if W.dtype in (np.float32, np.float64) else np.float64
    A = W.astype(np.float64)
    transposed = A.shape[0] < A.shape[1]
    if transposed:
        A = A.T
    G, V = _jacobi(A)
    sigma = np.sqrt(np.einsum("ij,ij->j", G, G))
    order = np.argsort(-sigma, kind="stable")
    sigma, G, V = sigma[order], G[:, order], V[:, order]
    missing = sigma <= np.finfo(np.float64).tiny
    U = np.zeros_like(G)
    ok = ~missing
    U[:, ok] = G[:, ok] / sigma[ok]
    sigma[missing] = 0.0
    if missing.any():
        _complete_basis(U, missing)
    if transposed:
        U, V = V, U
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[pivot, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    U = U * signs
    V = V * signs
    return SVDFactors(U.astype(out_dtype), sigma.astype(out_dtype), V.astype(out_dtype))


def reconstruct(f: SVDFactors, sigma_override=None, bias=None):
    """``U diag(sigma) V^T`` (optionally with replacement singular values).

    With ``bias`` given, returns ``(W, bias)``.
    """
    s = f.sigma if sigma_override is None else np.asarray(sigma_override)
    if s.shape != f.sigma.shape:
        raise DimensionError(f"sigma override has shape {s.shape}, expected {f.sigma.shape}")
    W = (f.U * s) @ f.V.T
    if bias is None:
        return W
    return W, np.asarray(bias)


def singular_values(M) -> np.ndarray:
    return svd_thin(np.asarray(M, dtype=np.float64)).sigma


def effective_rank(M, tau_rel: float = 1e-8) -> int:
    """Number of singular values above ``tau_rel * sigma_max``."""
    if not 0.0 < tau_rel < 1.0:
        raise ContractError(f"tau_rel must lie in (0, 1), got {tau_rel}")
    s = singular_values(M)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tau_rel * s[0]))


def truncation_error(sigma, k: int) -> float:
    """Frobenius error of the best rank-k approximation: sqrt(sum_{i>k} sigma_i^2)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if not 0 <= k <= sigma.shape[0]:
        raise ContractError(f"k={k} outside [0, {sigma.shape[0]}]")
    tail = np.sort(np.abs(sigma))[::-1][k:]
    return float(np.sqrt(np.sum(tail * tail)))


def orthogonality_defect(M) -> float:
    """``||M^T M - I||_F``, evaluated in float64."""
    M = np.asarray(M, dtype=np.float64)
    G = M.T @ M
    return float(np.linalg.norm(G - np.eye(G.shape[0])))
