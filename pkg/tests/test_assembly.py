import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from coaghom.assembly import (
    AssemblyError,
    assemble_boundary_mass,
    assemble_mass,
    assemble_stiffness,
    condense_periodic,
    lumped_mass,
    solve_cg,
)
from coaghom.geometry import INTERFACE, OUTER, PeriodicMap, TriMesh, rectangle_mesh


def right_triangle():
    return TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))


def test_reference_stiffness():
    K = assemble_stiffness(right_triangle()).toarray()
    np.testing.assert_allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_reference_mass():
    M = assemble_mass(right_triangle()).toarray()
    np.testing.assert_allclose(M, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24, atol=1e-15)


def test_degenerate_triangle_rejected():
    m = TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), np.array([[0, 1, 2]]))
    with pytest.raises(AssemblyError):
        assemble_stiffness(m)


def test_stiffness_kernel_and_row_sums(disk_meshes):
    square = rectangle_mesh((0, 0, 1, 1), 1, 1)
    assert np.abs(assemble_stiffness(square).sum(axis=1)).max() == 0.0
    K = assemble_stiffness(disk_meshes[0])
    c = np.full(K.shape[0], 3.7)
    assert np.abs(K @ c).max() < 1e-12


def test_tensor_coefficient_matches_scalar():
    m = rectangle_mesh((0, 0, 1, 1), 3, 3)
    a = assemble_stiffness(m, 2.5)
    b = assemble_stiffness(m, 2.5 * np.eye(2))
    assert abs(a - b).max() < 1e-14


def test_mass_integrates_one(disk_meshes):
    for mesh in disk_meshes[:2]:
        M = assemble_mass(mesh)
        one = np.ones(mesh.n_vertices)
        assert one @ (M @ one) == pytest.approx(mesh.area(), abs=1e-12)
        L = assemble_mass(mesh, lumped=True)
        assert (L - sp.diags(L.diagonal())).nnz == 0 or abs(L - sp.diags(L.diagonal())).max() == 0
        np.testing.assert_allclose(L.diagonal(), np.asarray(M.sum(axis=1)).ravel(), atol=1e-15)
        np.testing.assert_allclose(lumped_mass(mesh), L.diagonal())


def single_edge(length=2.0):
    v = np.array([[0.0, 0.0], [length, 0.0], [0.0, 1.0]])
    return TriMesh(v, np.array([[0, 1, 2]]), {INTERFACE: np.array([[0, 1]])})


def test_edge_mass_reference():
    B = assemble_boundary_mass(single_edge(2.0), INTERFACE).toarray()
    np.testing.assert_allclose(B[:2, :2], 2.0 / 6 * np.array([[2, 1], [1, 2]]), atol=1e-15)
    assert np.all(B[2] == 0)


def test_boundary_mass_weighted_length(disk_meshes):
    mesh = disk_meshes[1]
    w = lambda x: 1.0 + x[:, 0]  # noqa: E731
    B = assemble_boundary_mass(mesh, INTERFACE, w)
    one = np.ones(mesh.n_vertices)
    e = mesh.edges[INTERFACE]
    p = mesh.vertices
    ell = np.hypot(*(p[e[:, 1]] - p[e[:, 0]]).T)
    exact = np.sum(ell * (1.0 + 0.5 * (p[e[:, 0], 0] + p[e[:, 1], 0])))
    assert one @ (B @ one) == pytest.approx(exact, abs=1e-12)
    assert assemble_boundary_mass(mesh, INTERFACE, 0.0).count_nonzero() == 0


def test_unknown_tag():
    with pytest.raises(AssemblyError, match="unknown boundary tag"):
        assemble_boundary_mass(right_triangle(), OUTER)


def test_condense_periodic(disk_meshes):
    solid, _, pmap = disk_meshes
    K = assemble_stiffness(solid)
    same = condense_periodic(K, PeriodicMap.empty(solid.n_vertices))
    assert abs(same - K).max() == 0
    Kc = condense_periodic(K, pmap)
    assert Kc.shape[0] == solid.n_vertices - len(pmap.slaves)
    assert np.abs(Kc @ np.ones(Kc.shape[0])).max() < 1e-12
    with pytest.raises(AssemblyError):
        condense_periodic(K[:-1, :-1], pmap)


def test_cg_diagonal_and_zero():
    d = np.array([1.0, 2.0, 4.0, 8.0])
    b = np.array([3.0, -1.0, 2.0, 5.0])
    x, rep = solve_cg(sp.diags(d).tocsr(), b)
    np.testing.assert_allclose(x, b / d, rtol=1e-14)
    assert rep.iterations == 1 and not rep.breakdown
    x, rep = solve_cg(sp.diags(d).tocsr(), np.zeros(4))
    assert np.all(x == 0) and rep.iterations == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_cg_matches_dense_solve(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((10, 10))
    A = B @ B.T + 10 * np.eye(10)
    b = rng.standard_normal(10)
    x, rep = solve_cg(sp.csr_matrix(A), b, tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-8)
    assert not rep.breakdown


def test_cg_singular_with_nullspace(disk_meshes):
    solid, _, pmap = disk_meshes
    K = condense_periodic(assemble_stiffness(solid), pmap)
    rng = np.random.default_rng(0)
    b = rng.standard_normal(K.shape[0])
    b -= b.mean()
    x, rep = solve_cg(K, b, tol=1e-10, nullspace=True)
    assert not rep.breakdown
    assert np.linalg.norm(K @ x - b) <= 1e-9 * np.linalg.norm(b)
    assert abs(x.mean()) < 1e-12


def test_cg_reports_breakdown():
    rng = np.random.default_rng(3)
    B = rng.standard_normal((40, 40))
    A = sp.csr_matrix(B @ B.T + 1e-6 * np.eye(40))
    _, rep = solve_cg(A, rng.standard_normal(40), tol=1e-14, maxiter=2)
    assert rep.breakdown
