import math

import numpy as np
import pytest

from coaghom.geometry import build_perforated_domain
from coaghom.kinetics import KineticParams, ode_oracle
from coaghom.micro import MicroState, coupling_flux, init_micro, make_micro_config, run_micro, step_micro
from coaghom.problem import DataField, StepRejected

UNIT = (0.0, 0.0, 1.0, 1.0)


def config(disk_meshes, disk, eps=0.5, M=2, c=1.0, U=1.0, f=0.0, T=0.1, dt=0.01, **kw):
    p = kw.pop("params", None) or KineticParams.build(M, c=c)
    U1 = U if isinstance(U, DataField) else DataField("constant", U)
    F = f if isinstance(f, DataField) else DataField("constant", f)
    return make_micro_config(disk, UNIT, eps, 0.1, p, U1, F, T, dt, cell_meshes=disk_meshes, **kw)


def test_initial_state(disk, disk_meshes):
    cfg = config(disk_meshes, disk)
    s = init_micro(cfg)
    assert np.all(s.u[0] == 1.0) and np.all(s.u[1:] == 0)
    assert np.all(s.v == 0)
    far = config(disk_meshes, disk, U=DataField("gaussian", 1.0, center=(5.0, 5.0), width=0.2))
    assert init_micro(far).u.max() < 1e-100


def test_zero_state_stays_zero(disk, disk_meshes):
    cfg = config(disk_meshes, disk, U=0.0)
    s = step_micro(init_micro(cfg), cfg)
    assert np.all(s.u == 0) and np.all(s.v == 0)


def test_constant_preserved_without_reactions(disk, disk_meshes):
    p = KineticParams.build(2, a=np.zeros((2, 2)), b=np.zeros((2, 2)), c=0.0, allow_nonpaper=True)
    cfg = config(disk_meshes, disk, params=p, U=0.7)
    s = init_micro(cfg)
    for _ in range(5):
        s = step_micro(s, cfg)
    assert np.abs(s.u[0] - 0.7).max() < 1e-12


def test_zero_horizon_returns_initial(disk, disk_meshes):
    cfg = config(disk_meshes, disk, T=0.0)
    run = run_micro(cfg)
    assert len(run.snapshots) == 1 and len(run.diagnostics) == 1
    assert run.snapshots[0].t == 0.0


def test_count_nonincreasing_without_source(disk, disk_meshes):
    run = run_micro(config(disk_meshes, disk, M=3, T=0.3, dt=0.01))
    tot = np.array([r["total"] for r in run.diagnostics])
    assert np.all(np.diff(tot) <= 1e-8)
    assert tot[-1] < tot[0]


def test_count_budget_with_source(disk, disk_meshes):
    run = run_micro(config(disk_meshes, disk, M=3, T=0.3, dt=0.01, f=0.5))
    rows = run.diagnostics
    for a, b in zip(rows, rows[1:]):
        assert b["total"] - a["total"] <= b["dt"] * b["source"] + 1e-8


def test_flux_is_shared_bit_for_bit(disk, disk_meshes):
    run = run_micro(config(disk_meshes, disk, M=3, T=0.1))
    for info in run.steps:
        assert np.array_equal(info.flux_u, info.flux_v)
    assert run.steps[0].flux_u[0] > 0


def test_coupling_flux_values(disk, disk_meshes):
    cfg = config(disk_meshes, disk, eps=0.25)
    s = init_micro(cfg)
    sysm = cfg.system()
    below = MicroState(0.0, np.zeros_like(s.u), np.ones_like(s.v))
    assert np.all(coupling_flux(below, cfg) == 0)
    jump = MicroState(0.0, np.ones_like(s.u), np.zeros_like(s.v))
    length = cfg.inclusions.interface_length()
    assert length == pytest.approx(16 * 2 * math.pi * 0.25 * 0.25, rel=2e-2)
    np.testing.assert_allclose(coupling_flux(jump, cfg), 0.25 * length, rtol=1e-13)
    assert len(sysm.iu) == len(sysm.iv)


def test_large_step_rejected(disk, disk_meshes):
    cfg = config(disk_meshes, disk, U=50.0, dt=0.5, T=1.0)
    with pytest.raises(StepRejected, match="dt too large"):
        run_micro(cfg)


def test_single_cell_matches_ode_first_order(disk, disk_meshes):
    p = KineticParams.build(3, c=0.0, allow_nonpaper=True)
    errs = []
    for dt in (0.02, 0.01):
        cfg = make_micro_config(
            disk, UNIT, 1.0, 0.1, p, DataField("constant", 1.0), DataField("constant", 0.2), 0.5, dt,
            cell_meshes=disk_meshes,
        )
        run = run_micro(cfg)
        _, ref = ode_oracle([1.0, 0.0, 0.0], p, 0.5, 1e-3, source=0.2)
        u = run.snapshots[-1].u
        assert np.ptp(u, axis=(1, 2)).max() < 1e-12
        assert np.all(run.snapshots[-1].v == 0)
        errs.append(np.abs(u[:, 0, 0] - ref[-1]).max())
    assert 0.4 < errs[1] / errs[0] < 0.6


def test_cg_and_direct_agree(disk, disk_meshes):
    a = run_micro(config(disk_meshes, disk, M=2, T=0.05))
    b = run_micro(config(disk_meshes, disk, M=2, T=0.05, linear_solver="cg", cg_tol=1e-13))
    assert np.abs(a.snapshots[-1].u - b.snapshots[-1].u).max() < 1e-9
    assert np.abs(a.snapshots[-1].v - b.snapshots[-1].v).max() < 1e-9


def test_threads_are_deterministic(disk, disk_meshes):
    a = run_micro(config(disk_meshes, disk, M=3, T=0.05))
    b = run_micro(config(disk_meshes, disk, M=3, T=0.05, threads=3))
    assert np.array_equal(a.snapshots[-1].u, b.snapshots[-1].u)
    assert a.diagnostics == b.diagnostics


def test_pseudo_3d_matches_planar(disk, disk_meshes):
    a = run_micro(config(disk_meshes, disk, M=2, T=0.05))
    b = run_micro(config(disk_meshes, disk, M=2, T=0.05, n_z=4, L=2.0))
    for sa, sb in zip(a.snapshots, b.snapshots):
        assert np.abs(sb.u - sa.u).max() < 1e-12
        assert np.abs(sb.v - sa.v).max() < 1e-12


def test_z_dependent_data_diffuse_along_z(disk, disk_meshes):
    p = KineticParams.build(2, c=1.0, c_profile=lambda x, z: np.full(len(x), 1.0 + z))
    cfg = config(disk_meshes, disk, params=p, T=0.05, n_z=3, L=1.0)
    run = run_micro(cfg)
    v = run.snapshots[-1].v[0]
    assert v[2].sum() > v[0].sum()


def test_cell_average_sampling(disk, disk_meshes):
    f = DataField("cell_periodic", 1.0, amplitude=0.9)
    a = config(disk_meshes, disk, U=f)
    b = config(disk_meshes, disk, U=f, sampling="cell_average")
    assert np.ptp(init_micro(a).u[0]) > 0.5
    assert np.ptp(init_micro(b).u[0]) == 0.0


def test_no_cells_when_domain_too_small(disk):
    dom = build_perforated_domain(disk, (0, 0, 0.5, 0.5), 1.0)
    assert dom.inclusion_cells == ()
