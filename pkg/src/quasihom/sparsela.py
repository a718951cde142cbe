"""Sparse SPD and constrained saddle-point solves.

SPD systems go through Jacobi-preconditioned conjugate gradients with a
direct sparse factorization available as a drop-in (``factorized_spd``).
Saddle systems (equality-constrained quadratic minimization) are solved by a
direct factorization of the KKT matrix; the residual of both blocks is
checked after the solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolveError(Exception):
    pass


class ConvergenceError(SolveError):
    def __init__(self, message, achieved_residual):
        super().__init__(f"{message} (achieved relative residual {achieved_residual:.3e})")
        self.achieved_residual = achieved_residual


class RankDeficiencyError(SolveError):
    pass


def _check_symmetric(a: sp.csr_matrix, tol: float = 1e-10) -> None:
    d = a - a.T
    if d.nnz:
        scale = max(abs(a.data).max(), 1.0) if a.nnz else 1.0
        if abs(d.data).max() > tol * scale:
            raise ValueError("matrix is not symmetric")


def solve_spd(a, b, tol: float = 1e-10, max_iters: int | None = None) -> np.ndarray:
    """Conjugate gradients with diagonal preconditioning for SPD systems.

    Returns x with ||a x - b|| <= tol * ||b||. Deterministic for fixed input.
    """
    a = sp.csr_matrix(a)
    b = np.asarray(b, dtype=float)
    n = b.size
    if a.shape != (n, n):
        raise ValueError("shape mismatch")
    _check_symmetric(a)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    if max_iters is None:
        max_iters = 20 * n

    diag = a.diagonal()
    if np.any(diag <= 0):
        raise ValueError("nonpositive diagonal entry; matrix is not SPD")
    inv_diag = 1.0 / diag

    x = np.zeros(n)
    r = b.copy()
    z = inv_diag * r
    d = z.copy()
    rz = r @ z
    for _ in range(max_iters):
        ad = a @ d
        dad = d @ ad
        if dad <= 0:
            raise ValueError("matrix is not positive definite")
        alpha = rz / dad
        x += alpha * d
        r -= alpha * ad
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        z = inv_diag * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise ConvergenceError(
        f"PCG did not converge within {max_iters} iterations",
        np.linalg.norm(r) / bnorm,
    )


def factorized_spd(a):
    """Direct sparse factorization returning a solve closure (drop-in for
    repeated solves with one matrix)."""
    a = sp.csc_matrix(a)
    try:
        lu = spla.splu(a)
    except RuntimeError as exc:
        raise RankDeficiencyError(str(exc)) from exc
    return lu.solve


@dataclass
class SaddleSystem:
    a: sp.spmatrix                 # n x n, SPD on ker(b)
    b: sp.spmatrix                 # m x n constraints
    rhs_primal: np.ndarray
    rhs_constraint: np.ndarray


def solve_saddle(system: SaddleSystem, tol: float = 1e-10):
    """Minimize 1/2 x'Ax - f'x subject to Bx = g; returns (x, multipliers)."""
    a = sp.csr_matrix(system.a)
    b = sp.csr_matrix(system.b)
    f = np.asarray(system.rhs_primal, dtype=float)
    g = np.asarray(system.rhs_constraint, dtype=float)
    n = a.shape[0]
    m = b.shape[0]
    if b.shape[1] != n or f.size != n or g.size != m:
        raise ValueError("saddle system shape mismatch")
    if m == 0:
        return solve_spd(a, f, tol=tol), np.zeros(0)
    if m > n:
        raise RankDeficiencyError(f"more constraints ({m}) than unknowns ({n})")

    kkt = sp.bmat([[a, b.T], [b, None]], format="csc")
    rhs = np.concatenate([f, g])
    try:
        lu = spla.splu(kkt)
    except RuntimeError as exc:
        raise RankDeficiencyError(f"singular KKT system: {exc}") from exc
    sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise RankDeficiencyError("KKT solve produced non-finite values")
    x = sol[:n]
    lam = sol[n:]

    scale = 1.0 + np.linalg.norm(rhs)
    res_primal = np.linalg.norm(a @ x + b.T @ lam - f)
    res_constraint = np.linalg.norm(b @ x - g)
    if max(res_primal, res_constraint) > max(tol, 1e-8) * scale:
        raise ConvergenceError(
            "KKT residual too large", max(res_primal, res_constraint) / scale
        )
    return x, lam
