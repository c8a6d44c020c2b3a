"""Periodic corrector problems on the solid part of the cell and the effective tensor.

For each direction ``i`` the corrector ``w_i`` is the zero-mean periodic
solution of ``-div(grad w_i + e_i) = 0`` in ``Z`` with no-flux on the
inclusion boundary.  The effective tensor is
``A_ij = int_Z (grad w_i + e_i) . (grad w_j + e_j) dy``.  The cell variable is
two dimensional, so ``w_3 = 0`` and ``A_33 = |Z|``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .assembly import (
    assemble_mass,
    assemble_stiffness,
    condense_periodic,
    p1_gradients,
    periodic_prolongation,
    solve_cg,
)
from .geometry import CellGeometry, PeriodicMap, TriMesh, mesh_cell


class CellProblemError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorrectorField:
    direction: int
    values: np.ndarray
    iterations: int = 0
    residual: float = 0.0


@dataclass(frozen=True)
class EffectiveTensor:
    matrix: np.ndarray
    solid_fraction: float

    def to_dict(self) -> dict:
        return {"A": self.matrix.tolist(), "solid_fraction": self.solid_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "EffectiveTensor":
        return cls(np.asarray(d["A"], dtype=float), float(d["solid_fraction"]))


def _drift_load(mesh: TriMesh) -> np.ndarray:
    """``b[j, i] = int_Z d(phi_j)/dy_i``, shape ``(n, 2)``."""
    area, grad = p1_gradients(mesh)
    b = np.zeros((mesh.n_vertices, 2))
    for k in range(2):
        np.add.at(b[:, k], mesh.triangles.ravel(), (area[:, None] * grad[:, :, k]).ravel())
    return b


def solve_corrector(mesh: TriMesh, pmap: PeriodicMap, direction: int, tol: float = 1e-12) -> CorrectorField:
    """Discrete weak solution of the cell problem for unit direction ``direction`` (1, 2 or 3)."""
    if direction not in (1, 2, 3):
        raise CellProblemError(f"direction must be 1, 2 or 3, got {direction}")
    n = mesh.n_vertices
    if direction == 3:
        return CorrectorField(3, np.zeros(n))
    K = assemble_stiffness(mesh)
    P = periodic_prolongation(pmap)
    Kc = condense_periodic(K, pmap)
    rhs = -(P.T @ _drift_load(mesh)[:, direction - 1])
    wc, rep = solve_cg(Kc, rhs, tol=tol, nullspace=True)
    if rep.breakdown:
        raise CellProblemError(
            f"CG failed for corrector {direction}: residual {rep.residual:.3g} after {rep.iterations} iterations"
        )
    w = P @ wc
    mass = assemble_mass(mesh)
    w -= (mass @ w).sum() / mesh.area()
    return CorrectorField(direction, w, rep.iterations, rep.residual)


def solve_correctors(mesh: TriMesh, pmap: PeriodicMap, tol: float = 1e-12, threads: int = 1) -> list[CorrectorField]:
    """All three correctors; the two in-plane solves run concurrently when ``threads > 1``."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, 2)) as pool:
            w1, w2 = pool.map(lambda i: solve_corrector(mesh, pmap, i, tol), (1, 2))
    else:
        w1, w2 = (solve_corrector(mesh, pmap, i, tol) for i in (1, 2))
    return [w1, w2, solve_corrector(mesh, pmap, 3)]


def _flux_gradients(correctors, mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise ``grad_y w_i + e_i`` in three components, shape ``(3, nt, 3)``."""
    area, grad = p1_gradients(mesh)
    g = np.zeros((3, mesh.n_triangles, 3))
    for w in correctors:
        i = w.direction - 1
        g[i, :, :2] = np.einsum("tk,tkd->td", w.values[mesh.triangles], grad)
        g[i, :, i] += 1.0
    return area, g


def effective_tensor(correctors, mesh: TriMesh) -> EffectiveTensor:
    """``A_ij = int_Z (grad w_i + e_i) . (grad w_j + e_j)`` by exact quadrature on P1 gradients."""
    area, g = _flux_gradients(correctors, mesh)
    A = np.einsum("t,itd,jtd->ij", area, g, g)
    return EffectiveTensor(A, float(area.sum()))


def effective_tensor_energy(correctors, mesh: TriMesh) -> np.ndarray:
    """Alternative form ``A_ij = int_Z (grad w_i + e_i) . e_j``; equal to the above when the cell problem holds."""
    area, g = _flux_gradients(correctors, mesh)
    return np.einsum("t,itj->ij", area, g)


def cell_residual(correctors, mesh: TriMesh, pmap: PeriodicMap) -> float:
    """Largest periodic Galerkin residual of the cell problem over all test functions."""
    K = assemble_stiffness(mesh)
    P = periodic_prolongation(pmap)
    b = _drift_load(mesh)
    out = 0.0
    for w in correctors:
        if w.direction == 3:
            continue
        r = P.T @ (K @ w.values + b[:, w.direction - 1])
        out = max(out, float(np.abs(r).max()))
    return out


def corrector_reconstruct(gradients: np.ndarray, correctors) -> np.ndarray:
    """Oscillating correction ``sum_i w_i(y) dv/dx_i``.

    ``gradients`` has trailing axis of length 3 (or 2); the result has the
    leading shape of ``gradients`` followed by the cell-node axis.
    """
    g = np.asarray(gradients, dtype=float)
    W = np.stack([w.values for w in sorted(correctors, key=lambda c: c.direction)], axis=0)
    return np.tensordot(g, W[: g.shape[-1]], axes=([-1], [0]))


def compute_effective_tensor(
    geom: CellGeometry, h: float, tol: float = 1e-12, refine: int = 0, threads: int = 1
):
    """Mesh the cell, solve the correctors and return ``(tensor, correctors, solid_mesh, pmap)``."""
    from .geometry import refine_cell_meshes

    solid, incl, pmap = mesh_cell(geom, h, allow_empty=geom.is_empty)
    for _ in range(refine):
        solid, incl, pmap = refine_cell_meshes(geom, solid, incl)
    ws = solve_correctors(solid, pmap, tol=tol, threads=threads)
    return effective_tensor(ws, solid), ws, solid, pmap
