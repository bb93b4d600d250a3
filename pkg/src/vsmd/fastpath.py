"""Hot numeric kernels with paired numba / numpy implementations.

Every public kernel ``foo`` dispatches to ``_foo_numba`` or ``_foo_numpy``
according to :data:`vsmd._accel.USE_NUMBA`, except ``crps_ensemble``, which
always takes the numpy path because its cost is a sort.  Both variants are importable so
tests and ``benchmarks/bench_fastpath.py`` can exercise them side by side.

Array conventions: per-coordinate 2x2 blocks are stored as ``(..., d, 2, 2)``;
augmented states are split into ``x`` and ``v`` arrays of shape ``(n, d)``.
"""
import numpy as np

from . import _accel
from ._accel import njit

# Pade(13) numerator coefficients and the 1-norm bound (Higham 2005).
_PADE13 = np.array(
    [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ]
)
_THETA13 = 5.371920351148152


# --------------------------------------------------------------------------
# matrix exponential, batched over the leading axis
# --------------------------------------------------------------------------


def _expm_batch_numpy(A):
    A = np.asarray(A, dtype=np.float64)
    B, k, _ = A.shape
    norms = np.abs(A).sum(axis=1).max(axis=1)
    s = np.zeros(B, dtype=np.int64)
    big = norms > _THETA13
    s[big] = np.ceil(np.log2(norms[big] / _THETA13)).astype(np.int64)
    As = A / (2.0 ** s)[:, None, None]
    b = _PADE13
    ident = np.broadcast_to(np.eye(k), As.shape)
    A2 = As @ As
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = As @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    R = np.linalg.solve(V - U, V + U)
    smax = int(s.max()) if B else 0
    for j in range(smax):
        sq = R @ R
        R = np.where((j < s)[:, None, None], sq, R)
    return R


@njit(cache=True, error_model="numpy")
def _mm_into(A, B, C):
    # explicit loops into a preallocated buffer: BLAS overhead dominates at k = 2..4
    k = A.shape[0]
    for r in range(k):
        for c in range(k):
            acc = 0.0
            for m in range(k):
                acc += A[r, m] * B[m, c]
            C[r, c] = acc


@njit(cache=True, error_model="numpy")
def _solve_small_into(P, X):
    """Overwrite X with P^-1 X (Gaussian elimination, partial pivoting); P is destroyed."""
    k = P.shape[0]
    for col in range(k):
        piv = col
        for r in range(col + 1, k):
            if abs(P[r, col]) > abs(P[piv, col]):
                piv = r
        if piv != col:
            for c in range(k):
                P[col, c], P[piv, c] = P[piv, c], P[col, c]
                X[col, c], X[piv, c] = X[piv, c], X[col, c]
        for r in range(col + 1, k):
            f = P[r, col] / P[col, col]
            for c in range(col, k):
                P[r, c] -= f * P[col, c]
            for c in range(k):
                X[r, c] -= f * X[col, c]
    for col in range(k - 1, -1, -1):
        for c in range(k):
            acc = X[col, c]
            for m in range(col + 1, k):
                acc -= P[col, m] * X[m, c]
            X[col, c] = acc / P[col, col]


@njit(cache=True, error_model="numpy")
def _expm_batch_numba(A):
    B, k, _ = A.shape
    out = np.empty_like(A)
    b = _PADE13
    M = np.empty((k, k))
    M2 = np.empty((k, k))
    M4 = np.empty((k, k))
    M6 = np.empty((k, k))
    T = np.empty((k, k))
    U = np.empty((k, k))
    V = np.empty((k, k))
    W = np.empty((k, k))
    for i in range(B):
        nrm = 0.0
        for c in range(k):
            col = 0.0
            for r in range(k):
                col += abs(A[i, r, c])
            if col > nrm:
                nrm = col
        s = 0
        if nrm > _THETA13:
            s = int(np.ceil(np.log2(nrm / _THETA13)))
        scale = 2.0 ** (-s)
        for r in range(k):
            for c in range(k):
                M[r, c] = A[i, r, c] * scale
        _mm_into(M, M, M2)
        _mm_into(M2, M2, M4)
        _mm_into(M4, M2, M6)
        # U = M (M6 (b13 M6 + b11 M4 + b9 M2) + b7 M6 + b5 M4 + b3 M2 + b1 I)
        for r in range(k):
            for c in range(k):
                T[r, c] = b[13] * M6[r, c] + b[11] * M4[r, c] + b[9] * M2[r, c]
        _mm_into(M6, T, W)
        for r in range(k):
            for c in range(k):
                T[r, c] = W[r, c] + b[7] * M6[r, c] + b[5] * M4[r, c] + b[3] * M2[r, c] + (b[1] if r == c else 0.0)
        _mm_into(M, T, U)
        # V = M6 (b12 M6 + b10 M4 + b8 M2) + b6 M6 + b4 M4 + b2 M2 + b0 I
        for r in range(k):
            for c in range(k):
                T[r, c] = b[12] * M6[r, c] + b[10] * M4[r, c] + b[8] * M2[r, c]
        _mm_into(M6, T, V)
        for r in range(k):
            for c in range(k):
                vv = V[r, c] + b[6] * M6[r, c] + b[4] * M4[r, c] + b[2] * M2[r, c] + (b[0] if r == c else 0.0)
                T[r, c] = vv - U[r, c]
                W[r, c] = vv + U[r, c]
        _solve_small_into(T, W)
        for _ in range(s):
            _mm_into(W, W, T)
            W[:, :] = T
        out[i] = W
    return out


def expm_batch(A):
    """exp of each ``A[i]`` for a ``(B, k, k)`` stack."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _expm_batch_numba(A)
    return _expm_batch_numpy(A)


# --------------------------------------------------------------------------
# 2x2 Cholesky, batched
# --------------------------------------------------------------------------


def _chol2_batch_numpy(S):
    a = np.sqrt(S[:, 0, 0])
    b = S[:, 1, 0] / a
    c = np.sqrt(S[:, 1, 1] - b * b)
    L = np.zeros_like(S)
    L[:, 0, 0] = a
    L[:, 1, 0] = b
    L[:, 1, 1] = c
    return L


@njit(cache=True, error_model="numpy")
def _chol2_batch_numba(S):
    L = np.zeros_like(S)
    for i in range(S.shape[0]):
        a = np.sqrt(S[i, 0, 0])
        b = S[i, 1, 0] / a
        L[i, 0, 0] = a
        L[i, 1, 0] = b
        L[i, 1, 1] = np.sqrt(S[i, 1, 1] - b * b)
    return L


def chol2_batch(S):
    """Lower Cholesky factors of a ``(B, 2, 2)`` stack; NaN marks failure."""
    S = np.ascontiguousarray(S, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        if _accel.USE_NUMBA:
            return _chol2_batch_numba(S)
        return _chol2_batch_numpy(S)


# --------------------------------------------------------------------------
# per-coordinate 2x2 block application
# --------------------------------------------------------------------------


def _apply_blocks_numpy(M, x, v):
    xo = M[..., 0, 0] * x + M[..., 0, 1] * v
    vo = M[..., 1, 0] * x + M[..., 1, 1] * v
    return xo, vo


@njit(cache=True, error_model="numpy")
def _apply_blocks_numba(M, x, v):
    n, d = x.shape
    xo = np.empty_like(x)
    vo = np.empty_like(v)
    if M.shape[0] == n and M.ndim == 4:
        for i in range(n):
            for j in range(d):
                xo[i, j] = M[i, j, 0, 0] * x[i, j] + M[i, j, 0, 1] * v[i, j]
                vo[i, j] = M[i, j, 1, 0] * x[i, j] + M[i, j, 1, 1] * v[i, j]
    else:
        for i in range(n):
            for j in range(d):
                xo[i, j] = M[0, j, 0, 0] * x[i, j] + M[0, j, 0, 1] * v[i, j]
                vo[i, j] = M[0, j, 1, 0] * x[i, j] + M[0, j, 1, 1] * v[i, j]
    return xo, vo


def apply_blocks(M, x, v):
    """Apply 2x2 blocks ``M`` (``(d,2,2)`` shared or ``(n,d,2,2)`` per sample) to pairs ``(x_j, v_j)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if _accel.USE_NUMBA:
        if M.ndim == 3:
            M = M[None]
        if M.shape[0] not in (1, x.shape[0]):
            raise ValueError("block batch does not match state batch")
        return _apply_blocks_numba(np.ascontiguousarray(M), x, v)
    return _apply_blocks_numpy(M, x, v)


# --------------------------------------------------------------------------
# backward-SDE update pieces
#
# kx = 1 - 2*gamma*a_x (position stiffness), cv = gamma*(1 - 2*a_v) (friction).
# --------------------------------------------------------------------------


def _em_update_numpy(x, v, kx, cv, beta, bg_score_v, noise, h):
    xn = x - 0.5 * h * beta * v
    vn = v + 0.5 * h * beta * (kx * x + cv * v) + h * bg_score_v + noise
    return xn, vn


@njit(cache=True, error_model="numpy")
def _em_update_numba(x, v, kx, cv, beta, bg_score_v, noise, h):
    n, d = x.shape
    xn = np.empty_like(x)
    vn = np.empty_like(v)
    for i in range(n):
        for j in range(d):
            xn[i, j] = x[i, j] - 0.5 * h * beta * v[i, j]
            vn[i, j] = (
                v[i, j]
                + 0.5 * h * beta * (kx[j] * x[i, j] + cv[j] * v[i, j])
                + h * bg_score_v[i, j]
                + noise[i, j]
            )
    return xn, vn


def em_update(x, v, kx, cv, beta, bg_score_v, noise, h):
    """One reverse-time Euler-Maruyama step; ``bg_score_v`` is beta*gamma*s_v."""
    if _accel.USE_NUMBA:
        return _em_update_numba(x, v, np.ascontiguousarray(kx, dtype=np.float64),
                                np.ascontiguousarray(cv, dtype=np.float64), float(beta),
                                bg_score_v, noise, float(h))
    return _em_update_numpy(x, v, kx, cv, beta, bg_score_v, noise, h)


def _ab_half_numpy(x, v, kx, beta, h):
    x = x - 0.25 * h * beta * v
    v = v + 0.25 * h * beta * kx * x
    return x, v


def _ba_half_numpy(x, v, kx, beta, h):
    v = v + 0.25 * h * beta * kx * x
    x = x - 0.25 * h * beta * v
    return x, v


@njit(cache=True, error_model="numpy")
def _ab_half_numba(x, v, kx, beta, h):
    n, d = x.shape
    xo = np.empty_like(x)
    vo = np.empty_like(v)
    for i in range(n):
        for j in range(d):
            xx = x[i, j] - 0.25 * h * beta * v[i, j]
            xo[i, j] = xx
            vo[i, j] = v[i, j] + 0.25 * h * beta * kx[j] * xx
    return xo, vo


@njit(cache=True, error_model="numpy")
def _ba_half_numba(x, v, kx, beta, h):
    n, d = x.shape
    xo = np.empty_like(x)
    vo = np.empty_like(v)
    for i in range(n):
        for j in range(d):
            vv = v[i, j] + 0.25 * h * beta * kx[j] * x[i, j]
            vo[i, j] = vv
            xo[i, j] = x[i, j] - 0.25 * h * beta * vv
    return xo, vo


def ab_half(x, v, kx, beta, h):
    """Reverse-time A half-step followed by B half-step."""
    if _accel.USE_NUMBA:
        return _ab_half_numba(x, v, np.ascontiguousarray(kx, dtype=np.float64), float(beta), float(h))
    return _ab_half_numpy(x, v, kx, beta, h)


def ba_half(x, v, kx, beta, h):
    """Reverse-time B half-step followed by A half-step."""
    if _accel.USE_NUMBA:
        return _ba_half_numba(x, v, np.ascontiguousarray(kx, dtype=np.float64), float(beta), float(h))
    return _ba_half_numpy(x, v, kx, beta, h)


def _o_update_numpy(v, decay, kick, sd, bg_resid, xi):
    return decay * v + kick * bg_resid + sd * xi


@njit(cache=True, error_model="numpy")
def _o_update_numba(v, decay, kick, sd, bg_resid, xi):
    n, d = v.shape
    out = np.empty_like(v)
    for i in range(n):
        for j in range(d):
            out[i, j] = decay[j] * v[i, j] + kick[j] * bg_resid[i, j] + sd[j] * xi[i, j]
    return out


def o_coefficients(cv, beta, gamma, h, noise_on=True):
    """Per-coordinate ``(decay, kick, sd)`` of the reverse-time O step.

    The O generator is ``dv = (beta*cv/2) v dtau + beta*gamma s_v dtau + sqrt(beta*gamma) dW``.
    Writing ``s_v = -(cv/gamma) v + r`` splits off the score of the invariant
    velocity law ``N(0, gamma/cv)``; what remains is an OU process with rate
    ``kappa = beta*cv/2`` (solved exactly) forced by the residual ``r``, which is frozen.
    """
    cv = np.asarray(cv, dtype=np.float64)
    kappa = 0.5 * beta * cv
    z = kappa * h
    decay = np.exp(-z)
    # (1 - e^{-z})/z and (1 - e^{-2z})/(2z), stable near z = 0
    phi1 = np.where(np.abs(z) > 1e-8, -np.expm1(-z) / np.where(z == 0, 1.0, z), 1.0 - 0.5 * z)
    phi2 = np.where(np.abs(z) > 1e-8, -np.expm1(-2 * z) / np.where(z == 0, 1.0, 2 * z), 1.0 - z)
    kick = h * phi1
    sd = np.sqrt(beta * gamma * h * phi2) if noise_on else np.zeros_like(cv)
    return decay, kick, sd


def o_update(v, decay, kick, sd, bg_resid, xi):
    """Apply ``v <- decay*v + kick*bg_resid + sd*xi``; ``bg_resid = beta*gamma*s_v + beta*cv*v``."""
    if _accel.USE_NUMBA:
        f = lambda a: np.ascontiguousarray(a, dtype=np.float64)
        return _o_update_numba(v, f(decay), f(kick), f(sd), bg_resid, xi)
    return _o_update_numpy(v, decay, kick, sd, bg_resid, xi)


# --------------------------------------------------------------------------
# forward SDE simulation (time-invariant drift), used by the invariant-measure check
# --------------------------------------------------------------------------


def _forward_em_numpy(x, v, kx, cv, beta, gamma, h, xi):
    xn = x + 0.5 * h * beta * v
    v = v - 0.5 * h * beta * (kx * x + cv * v) + np.sqrt(beta * gamma * h) * xi
    return xn, v


@njit(cache=True, error_model="numpy")
def _forward_em_numba(x, v, kx, cv, beta, gamma, h, xi):
    n, d = x.shape
    sd = np.sqrt(beta * gamma * h)
    for i in range(n):
        for j in range(d):
            xo = x[i, j]
            x[i, j] = xo + 0.5 * h * beta * v[i, j]
            v[i, j] = v[i, j] - 0.5 * h * beta * (kx[j] * xo + cv[j] * v[i, j]) + sd * xi[i, j]
    return x, v


def forward_em(x, v, kx, cv, beta, gamma, h, nsteps, seed):
    """Simulate the forward linear SDE ``da = -beta/2 D a dt + g dW`` with constant diagonal drift.

    Noise comes from one numpy generator per call, so both backends consume
    the same stream and agree to rounding.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    kx = np.ascontiguousarray(kx, dtype=np.float64)
    cv = np.ascontiguousarray(cv, dtype=np.float64)
    xi = np.empty_like(v)
    for _ in range(int(nsteps)):
        rng.standard_normal(out=xi)
        if _accel.USE_NUMBA:
            x, v = _forward_em_numba(x, v, kx, cv, float(beta), float(gamma), float(h), xi)
        else:
            x, v = _forward_em_numpy(x, v, kx, cv, beta, gamma, h, xi)
    return x, v


# --------------------------------------------------------------------------
# empirical CRPS of an ensemble, one column per forecast target
# --------------------------------------------------------------------------


def _crps_ensemble_numpy(samples, obs):
    # mean|X-X'| over all S^2 ordered pairs via the sorted-order identity
    S = samples.shape[0]
    term1 = np.abs(samples - obs[None, :]).mean(axis=0)
    srt = np.sort(samples, axis=0)
    w = 2.0 * np.arange(1, S + 1) - S - 1.0
    term2 = 2.0 * (w[:, None] * srt).sum(axis=0) / (S * S)
    return term1 - 0.5 * term2


@njit(cache=True, error_model="numpy")
def _crps_ensemble_numba(samples, obs):
    S, P = samples.shape
    out = np.empty(P)
    cols = np.ascontiguousarray(samples.T)
    for p in range(P):
        col = np.sort(cols[p])
        t1 = 0.0
        t2 = 0.0
        for i in range(S):
            t1 += abs(col[i] - obs[p])
            t2 += (2.0 * (i + 1) - S - 1.0) * col[i]
        out[p] = t1 / S - t2 / (S * S)
    return out


def crps_ensemble(samples, obs):
    """Empirical CRPS ``E|X-y| - 0.5 E|X-X'|`` per column of ``samples`` (shape ``(S, P)``).

    Always runs the numpy variant: the cost is the per-column sort, and
    numpy's sort beats numba's by about 2.5x (see the benchmark).
    """
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    obs = np.ascontiguousarray(obs, dtype=np.float64)
    return _crps_ensemble_numpy(samples, obs)
