"""Dense small-matrix numerics behind the closed-form forward kernel.

All functions accept a single matrix or a stack ``(..., k, k)`` and are pure.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import fastpath
from .errors import DecompositionError, InvalidArgumentError, SingularKernelError, SingularMatrixError

H_COND_LIMIT = 1e12
JITTER_LEVELS = (1e-10, 1e-9, 1e-8)


def mat_exp(M):
    """Matrix exponential by Pade(13) scaling and squaring."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise InvalidArgumentError(f"mat_exp needs square matrices, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidArgumentError("mat_exp received non-finite entries")
    k = M.shape[-1]
    flat = M.reshape(-1, k, k)
    return fastpath.expm_batch(flat).reshape(M.shape)


@dataclass(frozen=True)
class BlockExpResult:
    """Numerator/denominator pair with ``Sigma = C @ inv(H)``."""

    C: np.ndarray
    H: np.ndarray

    def covariance(self):
        # Sigma = C H^{-1}  <=>  H^T Sigma^T = C^T
        St = np.linalg.solve(np.swapaxes(self.H, -1, -2), np.swapaxes(self.C, -1, -2))
        S = np.swapaxes(St, -1, -2)
        return 0.5 * (S + np.swapaxes(S, -1, -2))


def lyapunov_blockexp(D_int, J_int, Sigma0, node=None):
    """Solve the differential Lyapunov equation through one block exponential.

    ``D_int`` is the accumulated weighted drift ``int_0^t beta_s D_s ds`` and
    ``J_int`` the accumulated diffusion ``gamma * int_0^t beta_s J ds``.  Returns
    ``(C, H) = exp([[-D_int/2, J_int], [0, D_int^T/2]]) @ (Sigma0; I)``.
    Leading batch axes are supported on all three arguments.
    """
    D_int = np.asarray(D_int, dtype=np.float64)
    J_int = np.asarray(J_int, dtype=np.float64)
    Sigma0 = np.asarray(Sigma0, dtype=np.float64)
    m = D_int.shape[-1]
    if D_int.shape[-2:] != (m, m) or J_int.shape[-2:] != (m, m) or Sigma0.shape[-2:] != (m, m):
        raise InvalidArgumentError("lyapunov_blockexp: inconsistent block shapes")
    batch = np.broadcast_shapes(D_int.shape[:-2], J_int.shape[:-2], Sigma0.shape[:-2])
    D_int = np.broadcast_to(D_int, batch + (m, m))
    J_int = np.broadcast_to(J_int, batch + (m, m))
    Sigma0 = np.broadcast_to(Sigma0, batch + (m, m))

    block = np.zeros(batch + (2 * m, 2 * m))
    block[..., :m, :m] = -0.5 * D_int
    block[..., :m, m:] = J_int
    block[..., m:, m:] = 0.5 * np.swapaxes(D_int, -1, -2)
    E = mat_exp(block)
    C = E[..., :m, :m] @ Sigma0 + E[..., :m, m:]
    H = E[..., m:, m:]

    cond = np.linalg.cond(H.reshape(-1, m, m))
    bad = ~(cond <= H_COND_LIMIT)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        where = f"node {node}" if node is not None else f"batch entry {idx}"
        raise SingularKernelError(f"H_t is numerically singular at {where} (cond={cond[idx]:.3g})", node=node)
    return BlockExpResult(C=C, H=H)


def _symmetrize(S):
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def cholesky(Sigma):
    """Lower Cholesky factor with symmetrization and escalating diagonal jitter.

    Jitter ``level * trace(Sigma)/dim`` is tried for each level in
    ``JITTER_LEVELS`` only for matrices whose plain factorization fails.
    """
    S = _symmetrize(np.asarray(Sigma, dtype=np.float64))
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise InvalidArgumentError(f"cholesky needs square matrices, got shape {S.shape}")
    k = S.shape[-1]
    flat = S.reshape(-1, k, k)
    L = _chol_try(flat)
    failed = ~np.all(np.isfinite(L), axis=(1, 2))
    if np.any(failed):
        scale = np.trace(flat, axis1=1, axis2=2) / k
        scale = np.where(scale > 0, scale, 1.0)
        pending = np.flatnonzero(failed)
        for level in JITTER_LEVELS:
            trial = flat[pending] + (level * scale[pending])[:, None, None] * np.eye(k)
            Lt = _chol_try(trial)
            ok = np.all(np.isfinite(Lt), axis=(1, 2))
            L[pending[ok]] = Lt[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
        if pending.size:
            raise DecompositionError(
                f"matrix is indefinite after maximum jitter (batch entry {int(pending[0])})"
            )
    return L.reshape(S.shape)


def _chol_try(S):
    if S.shape[-1] == 2:
        L = fastpath.chol2_batch(S)
        # reject non-positive pivots so jitter kicks in
        bad = ~((L[:, 0, 0] > 0) & (L[:, 1, 1] > 0))
        L[bad] = np.nan
        return L
    out = np.full_like(S, np.nan)
    for i in range(S.shape[0]):
        try:
            out[i] = np.linalg.cholesky(S[i])
        except np.linalg.LinAlgError:
            pass
    return out


def solve_lower_transpose(L, y):
    """Return ``x`` with ``L.T @ x = y`` for lower-triangular ``L``."""
    L = np.asarray(L, dtype=np.float64)
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if np.any(diag == 0):
        raise SingularMatrixError("lower-triangular factor has a zero diagonal entry")
    return solve_triangular(L, np.asarray(y, dtype=np.float64), trans="T", lower=True)


def lower_inverse_transpose(L):
    """``L^{-T}`` for a stack of lower-triangular factors."""
    L = np.asarray(L, dtype=np.float64)
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if np.any(diag == 0):
        raise SingularMatrixError("lower-triangular factor has a zero diagonal entry")
    k = L.shape[-1]
    if k == 2:
        a, b, c = L[..., 0, 0], L[..., 1, 0], L[..., 1, 1]
        out = np.zeros_like(L)
        out[..., 0, 0] = 1.0 / a
        out[..., 0, 1] = -b / (a * c)
        out[..., 1, 1] = 1.0 / c
        return out
    eye = np.eye(k)
    flat = L.reshape(-1, k, k)
    inv = np.stack([solve_triangular(Li, eye, lower=True) for Li in flat])
    return np.swapaxes(inv, -1, -2).reshape(L.shape)
