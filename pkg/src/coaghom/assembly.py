"""P1 finite element operators, periodic condensation and a Jacobi-preconditioned CG."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import PeriodicMap, TriMesh


class AssemblyError(ValueError):
    pass


def p1_gradients(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Triangle areas and gradients of the three barycentric basis functions.

    Returns ``area`` of shape ``(nt,)`` and ``grad`` of shape ``(nt, 3, 2)``.
    """
    p = mesh.vertices[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(det <= 0.0):
        bad = int(np.argmin(det))
        raise AssemblyError(f"degenerate or inverted triangle {bad} (2*area = {det[bad]:.3g})")
    area = 0.5 * det
    # rows of inv([e1 e2]) give grad(phi1), grad(phi2)
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    g0 = -g1 - g2
    return area, np.stack([g0, g1, g2], axis=1)


def _scatter(mesh: TriMesh, local: np.ndarray, n: int | None = None) -> sp.csr_matrix:
    n = mesh.n_vertices if n is None else n
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_stiffness(mesh: TriMesh, coeff=1.0) -> sp.csr_matrix:
    """``K_ij = int coeff grad(phi_i) . grad(phi_j)``; ``coeff`` is a scalar or a 2x2 tensor."""
    if mesh.n_triangles == 0:
        return sp.csr_matrix((mesh.n_vertices, mesh.n_vertices))
    area, grad = p1_gradients(mesh)
    coeff = np.asarray(coeff, dtype=float)
    if coeff.ndim == 0:
        local = coeff * np.einsum("tik,tjk->tij", grad, grad)
    else:
        local = np.einsum("tik,kl,tjl->tij", grad, coeff[:2, :2], grad)
    return _scatter(mesh, area[:, None, None] * local)


def assemble_mass(mesh: TriMesh, lumped: bool = False) -> sp.csr_matrix:
    """Consistent P1 mass matrix, or its row-sum lumped diagonal."""
    n = mesh.n_vertices
    if mesh.n_triangles == 0:
        return sp.csr_matrix((n, n))
    area, _ = p1_gradients(mesh)
    if lumped:
        diag = np.bincount(mesh.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
        return sp.diags(diag).tocsr()
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter(mesh, area[:, None, None] * ref[None])


def lumped_mass(mesh: TriMesh) -> np.ndarray:
    """Nodal dual areas (diagonal of the lumped mass matrix)."""
    if mesh.n_triangles == 0:
        return np.zeros(mesh.n_vertices)
    area, _ = p1_gradients(mesh)
    return np.bincount(mesh.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=mesh.n_vertices)


def _edge_weights(mesh: TriMesh, edges: np.ndarray, weight) -> np.ndarray:
    """Nodal weight values at both ends of each edge, shape ``(k, 2)``."""
    if callable(weight):
        w = np.asarray(weight(mesh.vertices), dtype=float)
    else:
        w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        return np.full(edges.shape, float(w))
    if w.shape != (mesh.n_vertices,):
        raise AssemblyError("boundary weight must be scalar, nodal array or callable")
    return w[edges]


def assemble_boundary_mass(mesh: TriMesh, tag: str, weight=1.0, lumped: bool = False) -> sp.csr_matrix:
    """``B_ij = int_{tagged edges} w phi_i phi_j ds`` with ``w`` interpolated linearly.

    With ``lumped=True`` the edge integral uses the trapezoid rule, giving a
    diagonal operator.
    """
    if tag not in mesh.edges:
        raise AssemblyError(f"unknown boundary tag {tag!r}")
    e = np.asarray(mesh.edges[tag], dtype=int).reshape(-1, 2)
    n = mesh.n_vertices
    if len(e) == 0:
        return sp.csr_matrix((n, n))
    ell = np.hypot(*(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]).T)
    w = _edge_weights(mesh, e, weight)
    if lumped:
        vals = 0.5 * ell[:, None] * w
        return sp.diags(np.bincount(e.ravel(), weights=vals.ravel(), minlength=n)).tocsr()
    w0, w1 = w[:, 0], w[:, 1]
    local = (ell / 12.0)[:, None, None] * np.stack(
        [np.column_stack([3 * w0 + w1, w0 + w1]), np.column_stack([w0 + w1, w0 + 3 * w1])], axis=1
    )
    rows = np.repeat(e, 2, axis=1).ravel()
    cols = np.tile(e, (1, 2)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def boundary_node_weights(mesh: TriMesh, tag: str) -> tuple[np.ndarray, np.ndarray]:
    """Tagged nodes and their trapezoid quadrature weights (half the adjacent edge lengths)."""
    e = np.asarray(mesh.edges.get(tag, np.zeros((0, 2), int)), dtype=int).reshape(-1, 2)
    if len(e) == 0:
        return np.zeros(0, dtype=int), np.zeros(0)
    ell = np.hypot(*(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]).T)
    w = np.bincount(e.ravel(), weights=np.repeat(0.5 * ell, 2), minlength=mesh.n_vertices)
    nodes = np.unique(e)
    return nodes, w[nodes]


def periodic_prolongation(pmap: PeriodicMap) -> sp.csr_matrix:
    """Matrix ``P`` mapping reduced (master) dofs to all vertices."""
    n = pmap.n_vertices
    target = np.arange(n)
    if len(pmap.slaves):
        if np.any(np.isin(pmap.masters, pmap.slaves)):
            raise AssemblyError("periodic map chains: a master is itself a slave")
        target[pmap.slaves] = pmap.masters
    keep = np.ones(n, dtype=bool)
    keep[pmap.slaves] = False
    reduced = -np.ones(n, dtype=int)
    reduced[keep] = np.arange(keep.sum())
    cols = reduced[target]
    return sp.csr_matrix((np.ones(n), (np.arange(n), cols)), shape=(n, int(keep.sum())))


def condense_periodic(op: sp.spmatrix, pmap: PeriodicMap) -> sp.csr_matrix:
    """Fold slave rows and columns into their masters: ``P^T op P``."""
    if op.shape != (pmap.n_vertices, pmap.n_vertices):
        raise AssemblyError(f"periodic map for {pmap.n_vertices} vertices does not fit operator {op.shape}")
    P = periodic_prolongation(pmap)
    return (P.T @ op @ P).tocsr()


@dataclass
class LinearSolveReport:
    iterations: int
    residual: float
    breakdown: bool = False


def solve_cg(
    A: sp.spmatrix,
    rhs: np.ndarray,
    tol: float = 1e-10,
    nullspace: bool = False,
    maxiter: int | None = None,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, LinearSolveReport]:
    """Jacobi-preconditioned conjugate gradients.

    With ``nullspace=True`` the constant mode is projected out of the
    right-hand side and of every iterate, so the returned solution has zero
    (arithmetic) mean.  Non-convergence is reported, not raised.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(rhs, dtype=float).copy()
    n = b.size
    if nullspace:
        b -= b.mean()
    maxiter = maxiter if maxiter is not None else max(10 * n, 100)
    diag = A.diagonal()
    if np.any(diag <= 0):
        return np.zeros(n), LinearSolveReport(0, np.inf, True)
    inv_d = 1.0 / diag
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), LinearSolveReport(0, 0.0)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    it = 0
    res = np.inf
    for _restart in range(4):
        r = b - A @ x
        res = np.linalg.norm(r) / bnorm
        if res <= tol or it >= maxiter:
            break
        z = inv_d * r
        p = z.copy()
        rz = r @ z
        while it < maxiter:
            Ap = A @ p
            pAp = p @ Ap
            if pAp <= 0.0:
                return x, LinearSolveReport(it, res, True)
            alpha = rz / pAp
            x += alpha * p
            r -= alpha * Ap
            if nullspace:
                x -= x.mean()
            it += 1
            if np.linalg.norm(r) / bnorm <= tol:
                break
            z = inv_d * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
    res = np.linalg.norm(b - A @ x) / bnorm
    return x, LinearSolveReport(it, res, bool(res > tol))
