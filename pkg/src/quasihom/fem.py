"""P1 assembly for the nonlinear energy: values, gradients, linearized
operators, quasi-norm, Bregman distance and discrete norms.

Flux-side integrals are exact per element (both grad(u) and kappa are
element constants); the load pairs vertex-interpolated f through the
consistent mass matrix.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import nfunc, sparsela
from .coeff import ElementCoefficients
from .mesh import Mesh

MODES = ("gd", "pgd", "newton")


class FemState:
    """Nodal vector with zero boundary values and a per-element gradient cache."""

    def __init__(self, mesh: Mesh, u: np.ndarray | None = None):
        self.mesh = mesh
        if u is None:
            u = np.zeros(mesh.n_vertices)
        else:
            u = np.asarray(u, dtype=float).copy()
            if u.size != mesh.n_vertices:
                raise ValueError("state size does not match mesh")
            u[mesh.boundary_nodes] = 0.0
        self.u = u
        self._grads = None

    def grads(self) -> np.ndarray:
        """(nt, 2) array of element gradients of u."""
        if self._grads is None:
            _, gx, gy, _ = self.mesh.geometry()
            ut = self.u[self.mesh.triangles]
            self._grads = np.stack(
                [(gx * ut).sum(axis=1), (gy * ut).sum(axis=1)], axis=1
            )
        return self._grads

    def grad_norms(self) -> np.ndarray:
        g = self.grads()
        return np.hypot(g[:, 0], g[:, 1])

    def updated(self, u: np.ndarray) -> "FemState":
        return FemState(self.mesh, u)


@dataclass
class LinearizedOperator:
    mode: str
    matrix: sp.csr_matrix          # over free nodes
    free: np.ndarray               # global indices of free nodes
    free_pos: np.ndarray           # global -> free position (-1 on boundary)
    fingerprint: str

    def submatrix(self, nodes: np.ndarray) -> sp.csr_matrix:
        """Restriction to a subset of free nodes (given as global indices)."""
        pos = self.free_pos[nodes]
        if np.any(pos < 0):
            raise ValueError("subset contains boundary nodes")
        return self.matrix[pos][:, pos].tocsr()

    def quadratic_form(self, w_free: np.ndarray) -> float:
        return float(w_free @ (self.matrix @ w_free))


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix over all nodes (exact hat-product integrals)."""
    areas = mesh.areas
    t = mesh.triangles
    local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    data = areas[:, None, None] * local[None, :, :]
    rows = np.repeat(t, 3, axis=1).reshape(-1)
    cols = np.tile(t, (1, 3)).reshape(-1)
    m = sp.coo_matrix(
        (data.reshape(-1), (rows, cols)), shape=(mesh.n_vertices, mesh.n_vertices)
    )
    return m.tocsr()


def _scatter(mesh: Mesh, data: np.ndarray) -> sp.csr_matrix:
    """Assemble per-element 3x3 blocks into a global sparse matrix."""
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).reshape(-1)
    cols = np.tile(t, (1, 3)).reshape(-1)
    m = sp.coo_matrix(
        (data.reshape(-1), (rows, cols)), shape=(mesh.n_vertices, mesh.n_vertices)
    )
    return m.tocsr()


def weighted_stiffness(mesh: Mesh, elem_weights: np.ndarray) -> sp.csr_matrix:
    """Stiffness matrix with one scalar weight per element, over free nodes."""
    areas, gx, gy, _ = mesh.geometry()
    w = areas * elem_weights
    data = w[:, None, None] * (
        gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :]
    )
    full = _scatter(mesh, data)
    free = mesh.free_nodes
    return full[free][:, free].tocsr()


def energy(state: FemState, coeffs: ElementCoefficients, nf: nfunc.NFunction,
           load: np.ndarray) -> float:
    """J(u) = sum_T |T| kappa_T phi(|grad u|_T) - load . u (load = M f)."""
    mesh = state.mesh
    phi = nfunc.eval(nf, state.grad_norms())[0]
    return float(mesh.areas @ (coeffs.values * phi) - load @ state.u)


def residual(state: FemState, coeffs: ElementCoefficients, nf: nfunc.NFunction,
             load: np.ndarray) -> np.ndarray:
    """First-variation vector over free nodes."""
    mesh = state.mesh
    _, gx, gy, _ = mesh.geometry()
    g = state.grads()
    w = mesh.areas * coeffs.values * nfunc.eval_secant(nf, state.grad_norms())
    # contribution of element t to node tris[t,i]: w_t * (grad u . grad lambda_i)
    contrib = w[:, None] * (g[:, 0:1] * gx + g[:, 1:2] * gy)
    r = np.bincount(
        mesh.triangles.reshape(-1), weights=contrib.reshape(-1),
        minlength=mesh.n_vertices,
    )
    return (r - load)[mesh.free_nodes]


def _operator_fingerprint(mode: str, nf: nfunc.NFunction, weights: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(repr((mode, nf.params_key())).encode())
    h.update(np.round(weights, 12).tobytes())
    return h.hexdigest()[:16]


def assemble_linearized(state: FemState, coeffs: ElementCoefficients,
                        nf: nfunc.NFunction, mode: str) -> LinearizedOperator:
    """Linearized operator at the current state.

    gd: plain (coefficient-free) Laplacian. pgd: secant-weighted elliptic
    operator. newton: pgd plus the gradient-aligned rank-one correction of
    the second variation (zero where |grad u| = 0).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    mesh = state.mesh
    areas, gx, gy, _ = mesh.geometry()

    if mode == "gd":
        weights = areas
        data = weights[:, None, None] * (
            gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :]
        )
        fp_w = np.ones_like(areas)
    else:
        s = state.grad_norms()
        sec = nfunc.eval_secant(nf, s)
        weights = areas * coeffs.values * sec
        data = weights[:, None, None] * (
            gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :]
        )
        fp_w = coeffs.values * sec
        if mode == "newton":
            _, dphi, ddphi = nfunc.eval(nf, s)
            safe = np.where(s > 0, s, 1.0)
            c = np.where(s > 0, (ddphi * s - dphi) / safe ** 3, 0.0)
            g = state.grads()
            d = g[:, 0:1] * gx + g[:, 1:2] * gy      # (nt, 3): grad u . grad lambda_i
            data += (areas * coeffs.values * c)[:, None, None] * (
                d[:, :, None] * d[:, None, :]
            )
            fp_w = np.column_stack([fp_w, coeffs.values * c])

    full = _scatter(mesh, data)
    free = mesh.free_nodes
    mat = full[free][:, free].tocsr()
    return LinearizedOperator(
        mode=mode,
        matrix=mat,
        free=free,
        free_pos=mesh.free_pos,
        fingerprint=_operator_fingerprint(mode, nf, np.ascontiguousarray(fp_w)),
    )


def quasi_norm(state: FemState, w: np.ndarray, coeffs: ElementCoefficients,
               nf: nfunc.NFunction) -> float:
    """sum_T |T| kappa_T phi''(|grad u| + |grad w|) |grad w|^2."""
    mesh = state.mesh
    wn = FemState(mesh, w).grad_norms()
    dd = nfunc.eval(nf, state.grad_norms() + wn)[2]
    return float(mesh.areas @ (coeffs.values * dd * wn ** 2))


def bregman(state_u: FemState, state_v: FemState, coeffs: ElementCoefficients,
            nf: nfunc.NFunction, load: np.ndarray) -> float:
    """J(u) - J(v) - J'(v)(u - v); nonnegative by convexity."""
    if state_u.mesh is not state_v.mesh:
        raise ValueError("states must share a mesh")
    ju = energy(state_u, coeffs, nf, load)
    jv = energy(state_v, coeffs, nf, load)
    rv = residual(state_v, coeffs, nf, load)
    diff = (state_u.u - state_v.u)[state_u.mesh.free_nodes]
    return ju - jv - float(rv @ diff)


def residual_l2h_norm(r: np.ndarray, mass, tol: float = 1e-10) -> float:
    """Discrete dual norm sqrt(r' M^-1 r); `mass` is the free-node mass matrix
    or a prefactorized solve closure."""
    r = np.asarray(r, dtype=float)
    if not np.any(r):
        return 0.0
    x = mass(r) if callable(mass) else sparsela.solve_spd(mass, r, tol=tol)
    return math.sqrt(max(float(r @ x), 0.0))


def error_norms(state_u: FemState, state_v: FemState, p: float) -> tuple[float, float]:
    """(H1 seminorm, W^{1,p} seminorm) of u - v (unweighted)."""
    mesh = state_u.mesh
    d = FemState(mesh, state_u.u - state_v.u).grad_norms()
    h1 = float(np.sqrt(mesh.areas @ d ** 2))
    w1p = float((mesh.areas @ d ** p) ** (1.0 / p))
    return h1, w1p
