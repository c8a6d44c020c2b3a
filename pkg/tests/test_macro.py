import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from coaghom.assembly import assemble_stiffness, lumped_mass
from coaghom.cell_problem import EffectiveTensor, compute_effective_tensor
from coaghom.kinetics import KineticParams, eval_L
from coaghom.macro import MacroConfig, TwoScaleState, init_macro, run_macro, step_macro
from coaghom.problem import DataField, StepRejected, ZGrid

UNIT = (0.0, 0.0, 1.0, 1.0)


@pytest.fixture(scope="module")
def tensor(disk):
    return compute_effective_tensor(disk, 0.1)[0]


def config(disk_meshes, tensor, M=2, c=1.0, U=1.0, f=0.0, T=0.1, dt=0.01, n=(6, 6), **kw):
    p = kw.pop("params", None) or KineticParams.build(M, c=c, allow_nonpaper=(c == 0))
    U1 = U if isinstance(U, DataField) else DataField("constant", U)
    F = f if isinstance(f, DataField) else DataField("constant", f)
    return MacroConfig(UNIT, n, disk_meshes[1], tensor, p, U1, F, T, dt, **kw)


def test_initial_state(disk_meshes, tensor):
    cfg = config(disk_meshes, tensor, U=DataField("gaussian", 1.0, width=0.3))
    s = init_macro(cfg)
    N, K = cfg.system().N, disk_meshes[1].n_vertices
    assert s.u.shape == (2, 1, N, K) and s.v.shape == (2, 1, N)
    assert s.u[0, 0].size + s.v[0, 0].size == N * K + N
    assert np.all(s.v == 0)
    # y-independent data: every macro node carries a uniform cell field
    assert np.ptp(s.u[0, 0], axis=1).max() == 0.0


def test_rejects_indefinite_tensor(disk_meshes, tensor):
    bad = EffectiveTensor(np.diag([1.0, -1.0, 1.0]), 0.8)
    with pytest.raises(ValueError):
        config(disk_meshes, bad)


def test_zero_state_stays_zero(disk_meshes, tensor):
    cfg = config(disk_meshes, tensor, U=0.0)
    s = step_macro(init_macro(cfg), cfg)
    assert np.all(s.u == 0) and np.all(s.v == 0)


def test_zero_horizon(disk_meshes, tensor):
    run = run_macro(config(disk_meshes, tensor, T=0.0))
    assert len(run.snapshots) == 1 and run.snapshots[0].t == 0.0


def standalone_cell(mesh, p, u0, f, T, dt):
    """Independent lumped backward-Euler integration of one cell field without exchange."""
    m = lumped_mass(mesh)
    K = assemble_stiffness(mesh)
    u = u0.copy()
    for _ in range(round(T / dt)):
        g = eval_L(u, p)
        g[0] += f
        u = np.stack([spsolve(sp.diags(m) + dt * p.D[k] * K, m * (u[k] + dt * g[k])) for k in range(p.M)])
    return u


def test_decoupled_cells_match_standalone_run(disk_meshes, tensor):
    U = DataField("cell_periodic", 1.0, amplitude=0.5)
    cfg = config(disk_meshes, tensor, c=0.0, U=U, f=0.3, T=0.1, dt=0.01)
    run = run_macro(cfg)
    last = run.snapshots[-1]
    assert np.all(last.v == 0)
    sysm = cfg.system()
    u0 = np.zeros((2, sysm.K))
    u0[0] = U(0.0, np.zeros((sysm.K, 2)), sysm.y)
    ref = standalone_cell(disk_meshes[1], cfg.params, u0, 0.3, 0.1, 0.01)
    assert np.abs(last.u[:, 0, 0, :] - ref).max() < 1e-12
    assert np.ptp(last.u, axis=2).max() < 1e-14


def test_uniform_data_keep_cells_identical(disk_meshes, tensor):
    run = run_macro(config(disk_meshes, tensor, M=3, f=0.2, T=0.2))
    for s in run.snapshots:
        assert np.ptp(s.u, axis=2).max() < 1e-10
        assert np.ptp(s.v, axis=2).max() < 1e-10


def test_y_uniform_without_exchange(disk_meshes, tensor):
    run = run_macro(config(disk_meshes, tensor, c=0.0, f=0.2, T=0.1))
    assert np.ptp(run.snapshots[-1].u, axis=3).max() < 1e-12


def test_budget_and_exchange_balance(disk_meshes, tensor):
    U = DataField("gaussian", 1.0, width=0.2, offset=0.1)
    run = run_macro(config(disk_meshes, tensor, M=3, U=U, T=0.2))
    tot = np.array([r["total"] for r in run.diagnostics])
    assert np.all(np.diff(tot) <= 1e-8)
    for r in run.diagnostics:
        for m in range(1, 4):
            assert r[f"flux_u_{m}"] == r[f"flux_v_{m}"]
    assert run.diagnostics[1]["flux_u_1"] > 0
    assert run.snapshots[-1].v[0].max() > 0


def test_macro_conserves_with_exchange_only(disk_meshes, tensor):
    p = KineticParams.build(2, a=np.zeros((2, 2)), b=np.zeros((2, 2)), allow_nonpaper=True)
    run = run_macro(config(disk_meshes, tensor, params=p, T=0.2))
    tot = np.array([r["total"] for r in run.diagnostics])
    assert np.abs(tot - tot[0]).max() < 1e-12 * tot[0]


def test_large_step_rejected(disk_meshes, tensor):
    with pytest.raises(StepRejected):
        run_macro(config(disk_meshes, tensor, U=50.0, dt=0.5, T=1.0))


def test_pseudo_3d_matches_planar(disk_meshes, tensor):
    U = DataField("gaussian", 1.0, width=0.2)
    a = run_macro(config(disk_meshes, tensor, U=U, T=0.05))
    b = run_macro(config(disk_meshes, tensor, U=U, T=0.05, zgrid=ZGrid(5, 1.0)))
    for sa, sb in zip(a.snapshots, b.snapshots):
        assert np.abs(sb.u - sa.u).max() < 1e-12
        assert np.abs(sb.v - sa.v).max() < 1e-12


def test_threads_are_deterministic(disk_meshes, tensor):
    U = DataField("gaussian", 1.0, width=0.2)
    a = run_macro(config(disk_meshes, tensor, M=3, U=U, T=0.05))
    b = run_macro(config(disk_meshes, tensor, M=3, U=U, T=0.05, threads=3))
    assert a.diagnostics == b.diagnostics


def test_interpolation_reproduces_linear_fields(disk_meshes, tensor, rng):
    sysm = config(disk_meshes, tensor).system()
    pts = rng.random((200, 2))
    verts, w = sysm.interpolate(pts)
    field = 2.0 + 3.0 * sysm.x[:, 0] - 1.5 * sysm.x[:, 1]
    np.testing.assert_allclose((field[verts] * w).sum(axis=1), 2.0 + 3.0 * pts[:, 0] - 1.5 * pts[:, 1], atol=1e-13)
    assert np.all(w >= -1e-14)


def test_state_shapes_documented(disk_meshes, tensor):
    s = init_macro(config(disk_meshes, tensor))
    assert isinstance(s, TwoScaleState)
