"""Two-scale homogenized system: macro fields coupled to a cell problem at every macro vertex.

Macro unknowns ``v_m(x, z)`` diffuse with ``d_m A`` in-plane and ``d_m |Z|``
along z against the ``|Z|``-weighted mass.  Every macro vertex carries a cell
field ``u_m(y)`` on the inclusion mesh, diffusing with ``D_m`` in ``y`` and
``D~_m`` along z, and exchanging ``c_m (u_m - v_m)_+`` through the cell
boundary.  The per-node exchange array is computed once per step and used by
both the cell and macro equations.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import assemble_stiffness, boundary_node_weights, lumped_mass
from .cell_problem import EffectiveTensor
from .geometry import INTERFACE, TriMesh, rectangle_mesh
from .kinetics import KineticParams, eval_L, eval_N, loss_rate
from .micro import _Factorized
from .problem import POSITIVITY_TOL, DataField, StepRejected, ZGrid, step_count


@dataclass
class MacroConfig:
    rect: tuple
    n_macro: tuple[int, int]
    cell: TriMesh  # inclusion mesh of the unit cell
    tensor: EffectiveTensor
    params: KineticParams
    U1: DataField
    f: DataField
    T: float
    dt: float
    zgrid: ZGrid = field(default_factory=ZGrid)
    snapshot_every: int = 1
    truncated: bool = False
    linear_solver: str = "direct"
    cg_tol: float = 1e-13
    threads: int = 1
    _system: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        A = self.tensor.matrix
        if not np.allclose(A, A.T, atol=1e-8) or np.linalg.eigvalsh(0.5 * (A + A.T)).min() <= 0:
            raise ValueError("effective tensor must be symmetric positive definite")
        if self.tensor.solid_fraction <= 0:
            raise ValueError("solid fraction must be positive")

    @property
    def mesh(self) -> TriMesh:
        return self.system().mesh

    def system(self) -> "MacroSystem":
        if self._system is None:
            self._system = MacroSystem(self)
        return self._system


@dataclass(frozen=True)
class TwoScaleState:
    t: float
    v: np.ndarray  # (M, n_z, N)
    u: np.ndarray  # (M, n_z, N, K)


@dataclass(frozen=True)
class MacroStepInfo:
    dt: float
    cell_out: np.ndarray  # (M, n_z, N) exchange leaving the cell fields per macro node
    macro_in: np.ndarray  # (M, n_z, N) exchange entering the macro equation per macro node
    flux: np.ndarray  # (M,) integrated exchange
    guard: float
    source: float


class MacroSystem:
    def __init__(self, cfg: MacroConfig):
        self.cfg = cfg
        p = cfg.params
        self.M = p.M
        self.z = cfg.zgrid
        self.mesh = rectangle_mesh(cfg.rect, *cfg.n_macro)
        self.x = self.mesh.vertices
        self.N = self.mesh.n_vertices
        self.Zf = cfg.tensor.solid_fraction
        self.mN = lumped_mass(self.mesh)
        self.KA = assemble_stiffness(self.mesh, cfg.tensor.matrix)
        self.K1 = assemble_stiffness(self.mesh)
        self.mX = lumped_mass(cfg.cell)
        self.KX = assemble_stiffness(cfg.cell)
        self.K = cfg.cell.n_vertices
        self.iX, self.ell = boundary_node_weights(cfg.cell, INTERFACE)
        self.c = np.stack(
            [np.stack([p.transmission(m, self.x, z) for z in self.z.centers]) for m in range(self.M)]
        )  # (M, n_z, N)
        self.exchange_rate = np.zeros((self.M, self.z.n, self.N, self.K))
        if len(self.iX):
            self.exchange_rate[..., self.iX] = self.c[..., None] * (self.ell / self.mX[self.iX])
        self.y = cfg.cell.vertices
        self._solvers: dict = {}

    def solvers(self, m: int, dt: float):
        key = (m, dt)
        if key not in self._solvers:
            p = self.cfg.params
            Ac = sp.diags(self.mX) + dt * p.D[m] * self.KX
            Av = sp.diags(self.Zf * self.mN) + dt * p.d[m] * self.KA
            self._solvers[key] = (
                _Factorized(Ac, self.cfg.linear_solver, self.cfg.cg_tol),
                _Factorized(Av, self.cfg.linear_solver, self.cfg.cg_tol),
            )
        return self._solvers[key]

    def _field_on_cells(self, data: DataField, t: float) -> np.ndarray:
        """Evaluate ``data(t, x_n, y_k, z)`` for every macro node and cell node, shape ``(n_z, N, K)``."""
        if self.K == 0:
            return np.zeros((self.z.n, self.N, 0))
        X = np.repeat(self.x, self.K, axis=0)
        Y = np.tile(self.y, (self.N, 1))
        return np.stack([data(t, X, Y, z).reshape(self.N, self.K) for z in self.z.centers])

    def initial(self) -> TwoScaleState:
        u = np.zeros((self.M, self.z.n, self.N, self.K))
        u[0] = self._field_on_cells(self.cfg.U1, 0.0)
        if np.any(u < 0):
            raise ValueError("initial monomer profile is negative somewhere")
        return TwoScaleState(0.0, np.zeros((self.M, self.z.n, self.N)), u)

    def exchange(self, state: TwoScaleState) -> np.ndarray:
        """Quadrature values ``w_k c_m (u_m(y_k) - v_m)_+``, shape ``(M, n_z, N, K_interface)``."""
        jump = state.u[..., self.iX] - state.v[..., None]
        return self.c[..., None] * self.ell * np.maximum(jump, 0.0)

    def step(self, state: TwoScaleState, dt: float) -> tuple[TwoScaleState, MacroStepInfo]:
        cfg, p = self.cfg, self.cfg.params
        thr = p.truncation if cfg.truncated else None
        u, v = state.u, state.v
        g = self.exchange(state)

        rate_u = loss_rate(u, p.a, thr) + self.exchange_rate
        rate_v = loss_rate(v, p.b, thr)
        guard = dt * max(float(rate_u.max(initial=0.0)), float(rate_v.max(initial=0.0)))
        if guard >= 1.0:
            raise StepRejected(f"dt too large: sign guard dt*rate = {guard:.3g} >= 1 at t={state.t:.6g}")

        F = self._field_on_cells(cfg.f, state.t)
        gain_u = eval_L(u, p, cfg.truncated)
        gain_u[0] += F
        rhs_u = self.mX * (u + dt * gain_u)
        loss_side = np.zeros_like(u)
        loss_side[..., self.iX] = g
        rhs_u -= dt * loss_side
        # one reduction of the shared quadrature values feeds both balances
        macro_in = g.sum(axis=-1)
        cell_out = macro_in
        rhs_v = self.Zf * self.mN * (v + dt * eval_N(v, p, cfg.truncated)) + dt * self.mN * macro_in

        nz, N, K = self.z.n, self.N, self.K

        def advance(m):
            sc, sv = self.solvers(m, dt)
            un = sc.solve(rhs_u[m].reshape(nz * N, K).T).T.reshape(nz, N, K) if K else rhs_u[m]
            un = self.z.implicit_diffuse(un, p.D_tilde[m], dt)
            vn = sv.solve(rhs_v[m].T).T
            vn = self.z.implicit_diffuse(vn, p.d[m], dt)
            return un, vn

        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                res = list(pool.map(advance, range(self.M)))
        else:
            res = [advance(m) for m in range(self.M)]
        un = np.stack([r[0] for r in res])
        vn = np.stack([r[1] for r in res])
        new = TwoScaleState(state.t + dt, vn, un)
        worst = min(float(un.min(initial=0.0)), float(vn.min(initial=0.0)))
        if worst < -POSITIVITY_TOL:
            raise StepRejected(f"dt too large: negative value {worst:.3g} at t={new.t:.6g}")
        dz = self.z.dz
        info = MacroStepInfo(
            dt=dt,
            cell_out=cell_out,
            macro_in=macro_in,
            flux=dz * (macro_in * self.mN).sum(axis=(1, 2)),
            guard=guard,
            source=dz * float(np.sum(self.mN[:, None] * self.mX * F)),
        )
        return new, info

    def totals(self, state: TwoScaleState) -> tuple[np.ndarray, np.ndarray]:
        """Per-species cell totals ``int int u_m`` and macro totals ``|Z| int v_m``."""
        dz = self.z.dz
        cell = dz * np.einsum("mznk,n,k->m", state.u, self.mN, self.mX)
        macro = dz * self.Zf * np.einsum("mzn,n->m", state.v, self.mN)
        return cell, macro

    def gradient_norms(self, state: TwoScaleState) -> tuple[float, float]:
        dz = self.z.dz
        gv = sum(float(np.einsum("zi,zi->", vm, (self.K1 @ vm.T).T)) for vm in state.v) * dz
        if self.z.n > 1:
            gv += float(np.sum(self.mN * np.diff(state.v, axis=1) ** 2)) / dz
        gu = 0.0
        for um in state.u if self.K else ():
            flat = um.reshape(-1, self.K)
            gu += float(np.einsum("ik,ik,i->", flat, (self.KX @ flat.T).T, np.tile(self.mN, self.z.n))) * dz
        return float(np.sqrt(max(gv, 0.0))), float(np.sqrt(max(gu, 0.0)))

    def interpolate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Macro triangle vertices and barycentric weights for ``points`` (structured locator)."""
        x0, y0, x1, y1 = self.cfg.rect
        nx, ny = self.cfg.n_macro
        hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
        sx = (points[:, 0] - x0) / hx
        sy = (points[:, 1] - y0) / hy
        i = np.clip(np.floor(sx).astype(int), 0, nx - 1)
        j = np.clip(np.floor(sy).astype(int), 0, ny - 1)
        s, t = sx - i, sy - j
        idx = lambda a, b: a * (ny + 1) + b  # noqa: E731
        lower = s >= t
        # lower triangle (a, b, c) = (i,j), (i+1,j), (i+1,j+1); upper (a, c, d) with d = (i, j+1)
        verts = np.where(
            lower[:, None],
            np.column_stack([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]),
            np.column_stack([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]),
        )
        w = np.where(
            lower[:, None],
            np.column_stack([1 - s, s - t, t]),
            np.column_stack([1 - t, s, t - s]),
        )
        return verts, w


@dataclass
class MacroRun:
    snapshots: list
    diagnostics: list
    steps: list = field(default_factory=list)


def init_macro(cfg: MacroConfig) -> TwoScaleState:
    return cfg.system().initial()


def step_macro(state: TwoScaleState, cfg: MacroConfig, dt: float | None = None) -> TwoScaleState:
    return cfg.system().step(state, cfg.dt if dt is None else dt)[0]


def diagnostics_row(sysm: MacroSystem, state: TwoScaleState, info: MacroStepInfo | None) -> dict:
    cell, macro = sysm.totals(state)
    gv, gu = sysm.gradient_norms(state)
    row = {"t": state.t}
    for m in range(sysm.M):
        row[f"int_u_{m + 1}"] = float(cell[m])
        row[f"int_v_{m + 1}"] = float(macro[m])
    for m in range(sysm.M):
        if info is None:
            fu = fv = 0.0
        else:
            w = sysm.z.dz * sysm.mN
            fu = float((info.cell_out[m] * w).sum())
            fv = float((info.macro_in[m] * w).sum())
        row[f"flux_u_{m + 1}"] = fu
        row[f"flux_v_{m + 1}"] = fv
    row["total"] = float(cell.sum() + macro.sum())
    row["source"] = info.source if info else 0.0
    row["dt"] = info.dt if info else 0.0
    row["guard"] = info.guard if info else 0.0
    row["min_u"] = float(state.u.min(initial=0.0))
    row["min_v"] = float(state.v.min(initial=0.0))
    row["max_u1"] = float(state.u[0].max(initial=0.0))
    row["grad_v"] = gv
    row["grad_y_u"] = gu
    return row


def run_macro(cfg: MacroConfig, keep_all: bool = False) -> MacroRun:
    sysm = cfg.system()
    state = sysm.initial()
    snaps = [state]
    diags = [diagnostics_row(sysm, state, None)]
    infos = []
    steps = step_count(cfg.T, cfg.dt)
    for n, dt in enumerate(steps, start=1):
        state, info = sysm.step(state, dt)
        infos.append(info)
        diags.append(diagnostics_row(sysm, state, info))
        if keep_all or n % cfg.snapshot_every == 0 or n == len(steps):
            snaps.append(state)
    return MacroRun(snaps, diags, infos)
