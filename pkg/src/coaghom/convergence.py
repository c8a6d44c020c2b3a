"""Epsilon sweep: micro runs against one two-scale run, compared in space-time L2."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .macro import MacroConfig, MacroRun, run_macro
from .micro import MicroConfig, MicroRun, consistent_mass_matrices, run_micro


class ConvergenceError(RuntimeError):
    """A sub-run failed; ``report`` holds the rows completed so far."""

    def __init__(self, message: str, report: "ConvergenceReport"):
        super().__init__(message)
        self.report = report


@dataclass
class ConvergenceRow:
    epsilon: float
    h: float
    species: int  # 1-based
    e_v: float
    e_u: float
    ratio_v: float | None = None
    ratio_u: float | None = None

    def as_tuple(self) -> tuple:
        return (self.epsilon, self.h, self.species, self.e_v, self.e_u, self.ratio_v, self.ratio_u)


@dataclass
class ConvergenceReport:
    rows: list[ConvergenceRow] = field(default_factory=list)
    micro_runs: dict = field(default_factory=dict, repr=False)
    macro_run: MacroRun | None = field(default=None, repr=False)
    complete: bool = True

    def errors(self, species: int = 1, which: str = "v") -> np.ndarray:
        key = "e_v" if which == "v" else "e_u"
        return np.array([getattr(r, key) for r in self.rows if r.species == species])

    def epsilons(self) -> list[float]:
        return sorted({r.epsilon for r in self.rows}, reverse=True)


def _snapshot_times(run) -> np.ndarray:
    return np.array([s.t for s in run.snapshots])


def _l2_time(sq: np.ndarray, times: np.ndarray) -> np.ndarray:
    """``sqrt(int_0^T sq dt)`` with the trapezoid rule; ``sq`` has time as first axis."""
    if len(times) < 2:
        return np.sqrt(np.maximum(sq[0], 0.0)) * 0.0
    return np.sqrt(np.maximum(np.trapezoid(sq, times, axis=0), 0.0))


def _sq_norms(diff: np.ndarray, mass, dz: float) -> np.ndarray:
    """Per-species ``sum_z dz * d^T M d`` for ``diff`` of shape ``(M, n_z, n)``."""
    if diff.shape[-1] == 0:
        return np.zeros(diff.shape[0])
    return np.array([dz * sum(float(d @ (mass @ d)) for d in dm) for dm in diff])


def reconstruct_on_micro(macro_cfg: MacroConfig, state, micro_cfg: MicroConfig) -> tuple[np.ndarray, np.ndarray]:
    """Restrict a two-scale state to the micro meshes.

    ``v`` is interpolated linearly at perforated-mesh vertices.  For an
    inclusion vertex with cell-local index ``k``, ``u`` is the macro-linear
    interpolant of the cell values ``u(x_n, y_k)``.
    """
    sysm = macro_cfg.system()
    vv, wv = sysm.interpolate(micro_cfg.solid.vertices)
    v = np.einsum("mzni,ni->mzn", state.v[:, :, vv], wv)
    incl = micro_cfg.inclusions
    if incl.n_vertices == 0:
        return v, np.zeros(state.u.shape[:2] + (0,))
    vu, wu = sysm.interpolate(incl.vertices)
    loc = np.repeat(incl.cell_local[:, None], 3, axis=1)
    u = np.einsum("mzni,ni->mzn", state.u[:, :, vu, loc], wu)
    return v, u


def two_scale_errors(micro_cfg: MicroConfig, micro_run: MicroRun, macro_cfg: MacroConfig, macro_run: MacroRun):
    """Per-species ``(e_v, e_u)`` between a micro run and the reconstructed two-scale run."""
    tm, tM = _snapshot_times(micro_run), _snapshot_times(macro_run)
    if len(tm) != len(tM) or not np.allclose(tm, tM, rtol=0, atol=1e-12):
        raise ValueError("micro and macro runs must share snapshot times")
    Mu, Mv = consistent_mass_matrices(micro_cfg)
    dz = micro_cfg.zgrid.dz
    sv, su = [], []
    for a, b in zip(micro_run.snapshots, macro_run.snapshots):
        vh, uh = reconstruct_on_micro(macro_cfg, b, micro_cfg)
        sv.append(_sq_norms(a.v - vh, Mv, dz))
        su.append(_sq_norms(a.u - uh, Mu, dz))
    return _l2_time(np.array(sv), tm), _l2_time(np.array(su), tm)


def micro_errors(cfg: MicroConfig, run_a: MicroRun, run_b: MicroRun):
    """Per-species ``(e_v, e_u)`` between two micro runs on the same meshes."""
    ta, tb = _snapshot_times(run_a), _snapshot_times(run_b)
    if len(ta) != len(tb) or not np.array_equal(ta, tb):
        raise ValueError("runs must share snapshot times")
    Mu, Mv = consistent_mass_matrices(cfg)
    dz = cfg.zgrid.dz
    sv = [_sq_norms(a.v - b.v, Mv, dz) for a, b in zip(run_a.snapshots, run_b.snapshots)]
    su = [_sq_norms(a.u - b.u, Mu, dz) for a, b in zip(run_a.snapshots, run_b.snapshots)]
    return _l2_time(np.array(sv), ta), _l2_time(np.array(su), ta)


def _check_epsilons(epsilons) -> None:
    for a, b in zip(epsilons, epsilons[1:]):
        if b >= a:
            raise ValueError("epsilon list must be strictly decreasing")
    for e in epsilons:
        n = round(1.0 / e)
        if n < 1 or abs(1.0 / n - e) > 1e-12:
            raise ValueError(f"epsilon {e} is not of the form 1/n")


def run_convergence(
    epsilons,
    make_micro,
    macro_cfg: MacroConfig,
    threads: int = 1,
) -> ConvergenceReport:
    """Run the micro problem at each epsilon and the two-scale problem once.

    ``make_micro(eps)`` returns the :class:`MicroConfig` for one epsilon; all
    runs must use the same snapshot schedule as ``macro_cfg``.  Rows are
    ordered by epsilon (decreasing) then species, with ratios
    ``e(eps_{k+1}) / e(eps_k)``.
    """
    epsilons = list(epsilons)
    _check_epsilons(epsilons)
    report = ConvergenceReport()
    try:
        report.macro_run = run_macro(macro_cfg, keep_all=False)
    except Exception as exc:
        report.complete = False
        raise ConvergenceError(f"two-scale run failed: {exc}", report) from exc

    def one(eps):
        cfg = make_micro(eps)
        run = run_micro(cfg, keep_all=False)
        return cfg, run, two_scale_errors(cfg, run, macro_cfg, report.macro_run)

    prev = None
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(one, e) for e in epsilons]
        for eps, fut in zip(epsilons, futures):
            try:
                cfg, run, (ev, eu) = fut.result()
            except Exception as exc:
                report.complete = False
                for other in futures:
                    other.cancel()
                raise ConvergenceError(f"micro run at epsilon={eps} failed: {exc}", report) from exc
            report.micro_runs[eps] = (cfg, run)
            h = cfg.solid.max_edge_length()
            for m in range(len(ev)):
                row = ConvergenceRow(eps, h, m + 1, float(ev[m]), float(eu[m]))
                if prev is not None:
                    pv, pu = prev
                    row.ratio_v = float(ev[m] / pv[m]) if pv[m] > 0 else None
                    row.ratio_u = float(eu[m] / pu[m]) if pu[m] > 0 else None
                report.rows.append(row)
            prev = (ev, eu)
    return report
