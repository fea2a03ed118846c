"""Dense thin SVD via one-sided Jacobi, plus spectral helpers.

Sized for class-prototype matrices (a handful of rows, up to a few dozen
columns), where a simple, verifiable routine beats a general-purpose one.
All computation is float64 regardless of the caller's dtype.
"""

from dataclasses import dataclass

import numpy as np

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60


class SvdError(ValueError):
    pass


@dataclass
class SvdFactors:
    U: np.ndarray       # C x C orthogonal
    sigma: np.ndarray   # min(C, D) non-negative, non-increasing
    V: np.ndarray       # D x min(C, D), orthonormal columns


def _complete_orthonormal(Q, col_ok):
    """Fill columns of Q flagged not-ok with vectors orthonormal to the rest."""
    n, m = Q.shape
    basis = [Q[:, j] for j in range(m) if col_ok[j]]
    e = 0
    for j in range(m):
        if col_ok[j]:
            continue
        while e < n:
            v = np.zeros(n)
            v[e] = 1.0
            e += 1
            for u in basis:
                v -= (u @ v) * u
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                Q[:, j] = v
                basis.append(v)
                break
        else:  # pragma: no cover - cannot happen for m <= n
            raise SvdError("failed to complete an orthonormal basis")
    return Q


def svd(M):
    """Thin SVD of a C x D real matrix: M = U diag(sigma) V^T.

    One-sided Jacobi on the smaller side; converges when every pairwise
    column correlation falls below JACOBI_TOL (relative) or after
    MAX_SWEEPS sweeps.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise SvdError(f"expected a non-empty 2-d matrix, got shape {list(M.shape)}")
    if not np.all(np.isfinite(M)):
        raise SvdError("non-finite entries in input matrix")
    C, D = M.shape
    m = min(C, D)

    # Work on A = M^T (D x C) when C <= D so the rotated side has m columns;
    # otherwise work on M itself.  In both cases Jacobi orthogonalizes the
    # columns of A in place while accumulating the rotation product R.
    if C <= D:
        A = M.T.copy()
    else:
        A = M.copy()
    n_cols = A.shape[1]
    R = np.eye(n_cols)

    for sweep in range(MAX_SWEEPS):
        rotated = False
        for i in range(n_cols - 1):
            for j in range(i + 1, n_cols):
                ai, aj = A[:, i], A[:, j]
                aij = ai @ aj
                aii = ai @ ai
                ajj = aj @ aj
                if abs(aij) <= JACOBI_TOL * np.sqrt(aii * ajj) or aij == 0.0:
                    continue
                rotated = True
                theta = 0.5 * np.arctan2(2.0 * aij, aii - ajj)
                c, s = np.cos(theta), np.sin(theta)
                A[:, [i, j]] = A[:, [i, j]] @ np.array([[c, -s], [s, c]])
                R[:, [i, j]] = R[:, [i, j]] @ np.array([[c, -s], [s, c]])
        if not rotated:
            break
    else:
        raise SvdError(f"Jacobi SVD did not converge within {MAX_SWEEPS} sweeps")

    norms = np.linalg.norm(A, axis=0)
    order = np.argsort(-norms)
    norms = norms[order]
    A = A[:, order]
    R = R[:, order]
    ok = norms > 0
    Q = np.zeros_like(A)
    Q[:, ok] = A[:, ok] / norms[ok]
    Q = _complete_orthonormal(Q, ok)

    if C <= D:
        # M^T = Q diag(norms) R^T  =>  M = R diag(norms) Q^T
        U, sigma, V = R, norms, Q
    else:
        # M = Q diag(norms) R^T; Q is C x D, extend U to a full C x C basis
        U = np.zeros((C, C))
        U[:, :m] = Q
        U = _complete_orthonormal(U, [True] * m + [False] * (C - m))
        sigma, V = norms, R
    return SvdFactors(U=U, sigma=sigma, V=V)


def svd_reconstruction_error(M, factors):
    """|| M - U diag(sigma) V^T ||_F / max(||M||_F, 1e-12)."""
    M = np.asarray(M, dtype=np.float64)
    m = factors.sigma.shape[0]
    recon = factors.U[:, :m] @ np.diag(factors.sigma) @ factors.V.T
    return float(np.linalg.norm(M - recon) / max(np.linalg.norm(M), 1e-12))


def orthogonality_residual(factors):
    """Max of ||U^T U - I||_inf and ||V^T V - I||_inf."""
    ru = np.abs(factors.U.T @ factors.U - np.eye(factors.U.shape[1])).max()
    rv = np.abs(factors.V.T @ factors.V - np.eye(factors.V.shape[1])).max()
    return float(max(ru, rv))


def singular_values_2x2_3x3(M):
    """Independent oracle: sqrt of eigenvalues of M M^T via the
    characteristic polynomial, for 2x2 and 3x3 gram matrices only.

    Evaluated in high precision (mpmath); clustered eigenvalues make the
    polynomial route hopeless in float64, and the point of the oracle is
    to be more trustworthy than the routine it checks.
    """
    from mpmath import mp, mpf, polyroots

    A = np.asarray(M, dtype=np.float64)
    n = A.shape[0]
    if n not in (2, 3):
        raise SvdError("characteristic-polynomial oracle supports 2x2/3x3 only")
    with mp.workdps(60):
        Gm = [[sum(mpf(float(A[i, k])) * mpf(float(A[j, k]))
                   for k in range(A.shape[1])) for j in range(n)] for i in range(n)]
        if n == 2:
            tr = Gm[0][0] + Gm[1][1]
            det = Gm[0][0] * Gm[1][1] - Gm[0][1] * Gm[1][0]
            coeffs = [mpf(1), -tr, det]
        else:
            c2 = Gm[0][0] + Gm[1][1] + Gm[2][2]
            tr2 = sum(Gm[i][j] * Gm[j][i] for i in range(3) for j in range(3))
            c1 = (c2 * c2 - tr2) / 2
            c0 = (Gm[0][0] * (Gm[1][1] * Gm[2][2] - Gm[1][2] * Gm[2][1])
                  - Gm[0][1] * (Gm[1][0] * Gm[2][2] - Gm[1][2] * Gm[2][0])
                  + Gm[0][2] * (Gm[1][0] * Gm[2][1] - Gm[1][1] * Gm[2][0]))
            coeffs = [mpf(1), -c2, c1, -c0]
        roots = polyroots(coeffs, maxsteps=200, extraprec=120)
        lam = np.array(sorted((max(float(mp.re(r)), 0.0) for r in roots),
                              reverse=True))
    return np.sqrt(lam)
