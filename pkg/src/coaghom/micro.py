"""Time integration of the epsilon-scale coagulation-diffusion system.

``u_m`` lives on the inclusion set (diffusion ``eps^2 D_m`` in-plane,
``D~_m`` along z) and ``v_m`` on the perforated part (isotropic ``d_m``).  The
two are coupled only through the interface exchange
``eps * int c_m (u_m - v_m)_+``, removed from ``u`` and credited to ``v``.

Scheme: lumped-mass P1 in the plane, cell-centred finite differences in z,
backward Euler for diffusion (plane solve then z solve), explicit coagulation,
source and exchange.  The exchange is evaluated nodewise on shared interface
vertices with trapezoid weights, and the same array enters both equations.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import assemble_mass, assemble_stiffness, boundary_node_weights, lumped_mass, solve_cg
from .geometry import INTERFACE, PerforatedDomain, TriMesh
from .kinetics import KineticParams, eval_L, eval_N, loss_rate
from .problem import POSITIVITY_TOL, DataField, SolverFailure, StepRejected, ZGrid, step_count


@dataclass
class MicroConfig:
    domain: PerforatedDomain
    solid: TriMesh
    inclusions: TriMesh
    params: KineticParams
    U1: DataField
    f: DataField
    T: float
    dt: float
    zgrid: ZGrid = field(default_factory=ZGrid)
    snapshot_every: int = 1
    truncated: bool = False
    sampling: str = "oscillating"
    linear_solver: str = "direct"
    cg_tol: float = 1e-13
    threads: int = 1
    _system: object = field(default=None, init=False, repr=False, compare=False)

    @property
    def epsilon(self) -> float:
        return self.domain.epsilon

    def system(self) -> "MicroSystem":
        if self._system is None:
            self._system = MicroSystem(self)
        return self._system


@dataclass(frozen=True)
class MicroState:
    t: float
    u: np.ndarray  # (M, n_z, n_inclusion_nodes)
    v: np.ndarray  # (M, n_z, n_solid_nodes)


@dataclass(frozen=True)
class StepInfo:
    dt: float
    flux_u: np.ndarray  # exchange removed from u, per species
    flux_v: np.ndarray  # exchange credited to v, per species
    guard: float
    source: float  # int f over Pi_eps at the old time level


class _Factorized:
    """Cached solver for one SPD matrix; direct LU or CG."""

    def __init__(self, A: sp.spmatrix, method: str, tol: float):
        self.A = A.tocsc()
        self.method = method
        self.tol = tol
        self.n = A.shape[0]
        self.lu = splu(self.A) if method == "direct" and self.n else None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for every column of ``rhs`` (shape ``(n, k)``)."""
        if self.n == 0:
            return rhs.copy()
        if self.lu is not None:
            return self.lu.solve(np.ascontiguousarray(rhs))
        out = np.empty_like(rhs)
        for j in range(rhs.shape[1]):
            x, rep = solve_cg(self.A, rhs[:, j], tol=self.tol)
            if rep.breakdown:
                raise SolverFailure(f"CG did not converge (residual {rep.residual:.3g})")
            out[:, j] = x
        return out


class MicroSystem:
    """Precomputed operators and interface coupling data for a :class:`MicroConfig`."""

    def __init__(self, cfg: MicroConfig):
        self.cfg = cfg
        eps = cfg.epsilon
        p = cfg.params
        self.M = p.M
        self.z = cfg.zgrid
        self.mu = lumped_mass(cfg.inclusions)
        self.mv = lumped_mass(cfg.solid)
        self.Ku = assemble_stiffness(cfg.inclusions)
        self.Kv = assemble_stiffness(cfg.solid)
        self._solvers: dict = {}

        # interface pairing: inclusion node -> solid node with the same coordinates
        iu, ell = boundary_node_weights(cfg.inclusions, INTERFACE)
        index = {tuple(v): i for i, v in enumerate(cfg.solid.vertices.tolist())}
        try:
            iv = np.array([index[tuple(x)] for x in cfg.inclusions.vertices[iu].tolist()], dtype=int)
        except KeyError as exc:
            raise ValueError("inclusion and perforated meshes do not share interface vertices") from exc
        self.iu, self.iv = iu, iv.reshape(-1)
        self.weights = eps * ell  # eps * trapezoid length
        xi = cfg.inclusions.vertices[iu]
        self.c = np.stack(
            [np.stack([p.transmission(m, xi, z) for z in self.z.centers]) for m in range(self.M)]
        )  # (M, n_z, K)
        self.exchange_rate = np.zeros((self.M, self.z.n, len(self.mu)))
        if len(iu):
            self.exchange_rate[:, :, iu] = self.c * self.weights / self.mu[iu]

        xu = cfg.inclusions.vertices
        self.xu = xu
        self.yu = np.mod(xu / eps, 1.0)
        self.f_data = cfg.f if cfg.sampling == "oscillating" else cfg.f.cell_averaged()
        self.U_data = cfg.U1 if cfg.sampling == "oscillating" else cfg.U1.cell_averaged()

    def solvers(self, m: int, dt: float) -> tuple[_Factorized, _Factorized]:
        key = (m, dt)
        if key not in self._solvers:
            p, eps = self.cfg.params, self.cfg.epsilon
            Au = sp.diags(self.mu) + dt * eps**2 * p.D[m] * self.Ku
            Av = sp.diags(self.mv) + dt * p.d[m] * self.Kv
            self._solvers[key] = (
                _Factorized(Au, self.cfg.linear_solver, self.cfg.cg_tol),
                _Factorized(Av, self.cfg.linear_solver, self.cfg.cg_tol),
            )
        return self._solvers[key]

    def source(self, t: float) -> np.ndarray:
        """Monomer source at inclusion nodes, shape ``(n_z, n_u)``."""
        return np.stack([self.f_data(t, self.xu, self.yu, z) for z in self.z.centers])

    def initial(self) -> MicroState:
        M, nz = self.M, self.z.n
        u = np.zeros((M, nz, len(self.mu)))
        u[0] = np.stack([self.U_data(0.0, self.xu, self.yu, z) for z in self.z.centers])
        if np.any(u < 0):
            raise ValueError("initial monomer profile is negative somewhere")
        v = np.zeros((M, nz, len(self.mv)))
        return MicroState(0.0, u, v)

    def exchange(self, state: MicroState) -> np.ndarray:
        """Quadrature values ``eps * w_k * c_m (u_m - v_m)_+`` at interface nodes, shape ``(M, n_z, K)``."""
        jump = state.u[:, :, self.iu] - state.v[:, :, self.iv]
        return self.weights * self.c * np.maximum(jump, 0.0)

    def step(self, state: MicroState, dt: float) -> tuple[MicroState, StepInfo]:
        cfg, p = self.cfg, self.cfg.params
        thr = p.truncation if cfg.truncated else None
        u, v = state.u, state.v
        q = self.exchange(state)

        rate_u = loss_rate(u, p.a, thr) + self.exchange_rate
        rate_v = loss_rate(v, p.b, thr)
        guard = dt * max(float(rate_u.max(initial=0.0)), float(rate_v.max(initial=0.0)))
        if guard >= 1.0:
            raise StepRejected(f"dt too large: sign guard dt*rate = {guard:.3g} >= 1 at t={state.t:.6g}")

        F = self.source(state.t)
        gain_u = eval_L(u, p, cfg.truncated)
        gain_u[0] += F
        rhs_u = self.mu * (u + dt * gain_u)
        loss_side = np.zeros_like(u)
        loss_side[:, :, self.iu] = q
        rhs_u -= dt * loss_side
        rhs_v = self.mv * (v + dt * eval_N(v, p, cfg.truncated))
        credit_side = np.zeros_like(v)
        credit_side[:, :, self.iv] = q
        rhs_v += dt * credit_side

        def advance(m):
            su, sv = self.solvers(m, dt)
            un = su.solve(rhs_u[m].T).T
            vn = sv.solve(rhs_v[m].T).T
            un = self.z.implicit_diffuse(un, p.D_tilde[m], dt)
            vn = self.z.implicit_diffuse(vn, p.d[m], dt)
            return un, vn

        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                res = list(pool.map(advance, range(self.M)))
        else:
            res = [advance(m) for m in range(self.M)]
        un = np.stack([r[0] for r in res])
        vn = np.stack([r[1] for r in res])
        new = MicroState(state.t + dt, un, vn)
        worst = min(float(un.min(initial=0.0)), float(vn.min(initial=0.0)))
        if worst < -POSITIVITY_TOL:
            raise StepRejected(f"dt too large: negative value {worst:.3g} at t={new.t:.6g}")
        dz = self.z.dz
        info = StepInfo(
            dt=dt,
            flux_u=dz * loss_side[:, :, self.iu].sum(axis=(1, 2)),
            flux_v=dz * credit_side[:, :, self.iv].sum(axis=(1, 2)),
            guard=guard,
            source=dz * float(np.sum(self.mu * F)),
        )
        return new, info

    # --- diagnostics ---------------------------------------------------------

    def totals(self, state: MicroState) -> tuple[np.ndarray, np.ndarray]:
        """Per-species ``int u_m`` over Pi_eps and ``int v_m`` over Omega_eps (lumped quadrature)."""
        dz = self.z.dz
        return dz * (state.u * self.mu).sum(axis=(1, 2)), dz * (state.v * self.mv).sum(axis=(1, 2))

    def gradient_norms(self, state: MicroState) -> tuple[float, float]:
        """``||grad v||_{L2}`` and ``eps ||grad_x u||_{L2}`` summed over species."""
        dz, eps = self.z.dz, self.cfg.epsilon
        gv = sum(float(np.einsum("zi,zi->", vm, (self.Kv @ vm.T).T)) for vm in state.v) * dz
        gu = sum(float(np.einsum("zi,zi->", um, (self.Ku @ um.T).T)) for um in state.u) * dz
        if self.z.n > 1:
            gv += float(np.sum(self.mv * np.diff(state.v, axis=1) ** 2)) / dz
        return float(np.sqrt(max(gv, 0.0))), eps * float(np.sqrt(max(gu, 0.0)))


@dataclass
class MicroRun:
    snapshots: list
    diagnostics: list
    steps: list = field(default_factory=list)


def init_micro(cfg: MicroConfig) -> MicroState:
    return cfg.system().initial()


def step_micro(state: MicroState, cfg: MicroConfig, dt: float | None = None) -> MicroState:
    return cfg.system().step(state, cfg.dt if dt is None else dt)[0]


def coupling_flux(state: MicroState, cfg: MicroConfig) -> np.ndarray:
    """``eps * int_{Gamma_eps} c_m (u_m - v_m)_+`` per species (trapezoid on interface nodes)."""
    sysm = cfg.system()
    return sysm.z.dz * sysm.exchange(state).sum(axis=(1, 2))


def diagnostics_row(sysm: MicroSystem, state: MicroState, info: StepInfo | None) -> dict:
    iu, iv = sysm.totals(state)
    gv, gu = sysm.gradient_norms(state)
    row = {"t": state.t}
    for m in range(sysm.M):
        row[f"int_u_{m + 1}"] = float(iu[m])
        row[f"int_v_{m + 1}"] = float(iv[m])
    for m in range(sysm.M):
        row[f"flux_u_{m + 1}"] = float(info.flux_u[m]) if info else 0.0
        row[f"flux_v_{m + 1}"] = float(info.flux_v[m]) if info else 0.0
    row["total"] = float(iu.sum() + iv.sum())
    row["source"] = info.source if info else 0.0
    row["dt"] = info.dt if info else 0.0
    row["guard"] = info.guard if info else 0.0
    row["min_u"] = float(state.u.min(initial=0.0))
    row["min_v"] = float(state.v.min(initial=0.0))
    row["max_u1"] = float(state.u[0].max(initial=0.0))
    row["grad_v"] = gv
    row["eps_grad_u"] = gu
    return row


def run_micro(cfg: MicroConfig, keep_all: bool = False) -> MicroRun:
    """Integrate to ``T``; diagnostics every step, snapshots every ``snapshot_every`` steps and at ``T``."""
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
    return MicroRun(snaps, diags, infos)


def consistent_mass_matrices(cfg: MicroConfig):
    """Consistent mass matrices of the inclusion and perforated meshes (for error norms)."""
    return assemble_mass(cfg.inclusions), assemble_mass(cfg.solid)


def make_micro_config(
    geom,
    rect,
    epsilon: float,
    h_cell: float,
    params: KineticParams,
    U1: DataField,
    f: DataField,
    T: float,
    dt: float,
    n_z: int = 1,
    L: float = 0.0,
    cell_meshes=None,
    **kwargs,
) -> MicroConfig:
    """Build the perforated domain and its meshes; ``h_cell`` is the edge length in cell units."""
    from .geometry import build_perforated_domain, mesh_perforated

    dom = build_perforated_domain(geom, rect, epsilon, L)
    solid, incl = mesh_perforated(dom, h_cell * epsilon, cell_meshes=cell_meshes)
    return MicroConfig(dom, solid, incl, params, U1, f, T, dt, zgrid=ZGrid(n_z, L), **kwargs)
