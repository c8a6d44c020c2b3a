"""Post-run audit of the discrete solution properties both integrators are meant to preserve."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .problem import POSITIVITY_TOL

BOUND_RTOL = 1e-6
BUDGET_TOL = 1e-8
Z_TOL = 1e-8
CHECK_NAMES = ("positivity", "monomer_bound", "count_monotonicity", "exchange_balance", "z_invariance")


@dataclass
class InvariantCheck:
    """One property: ``margin`` is the worst-case slack (negative means violated)."""

    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class InvariantReport:
    checks: list[InvariantCheck] = field(default_factory=list)
    audits: dict = field(default_factory=dict)
    step_margins: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> InvariantCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_rows(self) -> list[dict]:
        return [{"check": c.name, "passed": c.passed, "margin": c.margin, "detail": c.detail} for c in self.checks]


def _positivity(snapshots) -> InvariantCheck:
    worst, where = math.inf, ""
    for s in snapshots:
        for name in ("u", "v"):
            a = getattr(s, name)
            if a.size == 0:
                continue
            idx = np.unravel_index(int(np.argmin(a)), a.shape)
            if a[idx] < worst:
                worst = float(a[idx])
                node = idx[2] if len(idx) == 3 else tuple(int(i) for i in idx[2:])
                where = f"{name}_{idx[0] + 1} node {node} z-layer {idx[1]} at t={s.t:.6g}"
    if worst == math.inf:
        return InvariantCheck("positivity", True, 0.0, "no data")
    passed = worst >= -POSITIVITY_TOL
    return InvariantCheck("positivity", passed, worst, f"min {worst:.3g} at {where}")


def _monomer_bound(snapshots, U_sup: float, f_sup: float, T: float) -> InvariantCheck:
    bound = (U_sup + f_sup) * math.exp(T)
    peak, when = 0.0, 0.0
    for s in snapshots:
        val = float(s.u[0].max(initial=0.0))
        if val > peak:
            peak, when = val, s.t
    margin = bound - peak
    passed = peak <= bound * (1.0 + BOUND_RTOL)
    detail = f"max u_1 = {peak:.6g} (t={when:.6g}), bound {bound:.6g}"
    return InvariantCheck("monomer_bound", passed, margin, detail)


def _count_budget(diagnostics) -> tuple[InvariantCheck, np.ndarray]:
    """Per step: ``total_{n+1} - total_n <= dt * source_n`` (sources only add)."""
    if len(diagnostics) < 2:
        return InvariantCheck("count_monotonicity", True, 0.0, "no steps"), np.zeros(0)
    tot = np.array([r["total"] for r in diagnostics])
    dt = np.array([r["dt"] for r in diagnostics[1:]])
    src = np.array([r["source"] for r in diagnostics[1:]])
    slack = dt * src - np.diff(tot)
    k = int(np.argmin(slack))
    passed = bool(slack[k] >= -BUDGET_TOL)
    detail = f"worst step {k + 1} (t={diagnostics[k + 1]['t']:.6g})"
    return InvariantCheck("count_monotonicity", passed, float(slack[k]), detail), slack


def _exchange_balance(diagnostics) -> InvariantCheck:
    worst, at = 0.0, ""
    for r in diagnostics:
        for key in r:
            if key.startswith("flux_u_"):
                fu, fv = r[key], r["flux_v_" + key[len("flux_u_"):]]
                d = abs(fu - fv)
                if d > worst:
                    worst, at = d, f"{key} at t={r['t']:.6g}"
    scale = max([abs(r[k]) for r in diagnostics for k in r if k.startswith("flux_")] + [1.0])
    passed = worst <= 4 * np.finfo(float).eps * scale
    return InvariantCheck("exchange_balance", passed, -worst if worst else 0.0, "exact" if worst == 0 else f"max mismatch {worst:.3g} ({at})")


def _z_invariance(snapshots, z_independent: bool) -> InvariantCheck:
    if not snapshots or snapshots[0].v.shape[1] == 1:
        return InvariantCheck("z_invariance", True, 0.0, "planar run")
    if not z_independent:
        return InvariantCheck("z_invariance", True, 0.0, "data depend on z; not applicable")
    worst = 0.0
    for s in snapshots:
        for a in (s.u, s.v):
            if a.size:
                worst = max(worst, float(np.max(a.max(axis=1) - a.min(axis=1))))
    return InvariantCheck("z_invariance", worst <= Z_TOL, -worst if worst else 0.0, f"max spread across z layers {worst:.3g}")


def check_invariants(
    snapshots,
    diagnostics,
    U_sup: float,
    f_sup: float,
    T: float,
    z_independent: bool = True,
) -> InvariantReport:
    """Evaluate positivity, the monomer bound, the count budget, exchange balance and z-invariance.

    ``snapshots`` are states with ``t``, ``u`` and ``v`` (species first, z
    second); ``diagnostics`` are the per-step rows of a run.  Gradient norms
    recorded in the rows are audited for finiteness and their maxima reported.
    """
    rep = InvariantReport()
    rep.checks.append(_positivity(snapshots))
    rep.checks.append(_monomer_bound(snapshots, U_sup, f_sup, T))
    budget, slack = _count_budget(diagnostics)
    rep.checks.append(budget)
    rep.step_margins["count_monotonicity"] = slack
    rep.checks.append(_exchange_balance(diagnostics))
    rep.checks.append(_z_invariance(snapshots, z_independent))
    for key in ("grad_v", "eps_grad_u", "grad_y_u"):
        vals = [r[key] for r in diagnostics if key in r]
        if vals:
            rep.audits[f"max_{key}"] = float(max(vals))
            rep.audits[f"{key}_finite"] = bool(np.all(np.isfinite(vals)))
    return rep
