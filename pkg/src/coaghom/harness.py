"""Run orchestration shared by the command line and the test suite."""
from __future__ import annotations

import time

from .cell_problem import compute_effective_tensor
from .config import RunConfig
from .convergence import run_convergence
from .export import RunManifest, guard_summary, mesh_stats
from .geometry import mesh_cell
from .invariants import check_invariants
from .kinetics import ode_oracle
from .macro import run_macro
from .micro import run_micro


def cell_meshes(cfg: RunConfig):
    """Solid mesh, inclusion mesh and periodic map of the unit cell at ``geometry.h_cell``."""
    geom = cfg.geometry()
    return mesh_cell(geom, cfg["geometry"]["h_cell"], allow_empty=geom.is_empty)


def effective_tensor(cfg: RunConfig, threads: int = 1):
    c = cfg["cell"]
    return compute_effective_tensor(cfg.geometry(), c["h"], tol=c["tol"], refine=c["refine"], threads=threads)


def new_manifest(cfg: RunConfig, command: str, threads: int = 1, seed: int | None = None) -> RunManifest:
    man = RunManifest(cfg["output"]["run_id"], command, cfg.raw, threads=threads, nonpaper_flags=cfg.nonpaper_flags())
    man.timing["started"] = time.time()
    man.results["seed"] = seed
    return man


def micro_run(cfg: RunConfig, threads: int = 1, keep_all: bool = False):
    """Build and integrate the epsilon-scale problem; returns ``(micro_config, run)``."""
    mcfg = cfg.micro_config(cell_meshes=cell_meshes(cfg), threads=threads)
    return mcfg, run_micro(mcfg, keep_all=keep_all)


def macro_run(cfg: RunConfig, threads: int = 1, tensor=None, keep_all: bool = False):
    """Compute (or reuse) the effective tensor and integrate the two-scale problem."""
    if tensor is None:
        tensor = effective_tensor(cfg, threads)[0]
    mc = cfg.macro_config(tensor, cell_meshes(cfg)[1], threads=threads)
    return mc, run_macro(mc, keep_all=keep_all)


def convergence_study(cfg: RunConfig, threads: int = 1, tensor=None):
    if tensor is None:
        tensor = effective_tensor(cfg, threads)[0]
    meshes = cell_meshes(cfg)
    mc = cfg.macro_config(tensor, meshes[1], threads=1)
    return run_convergence(
        cfg["convergence"]["epsilons"],
        lambda eps: cfg.micro_config(epsilon=eps, cell_meshes=meshes, threads=1),
        mc,
        threads=threads,
    )


def invariants_for(cfg: RunConfig, run):
    T = cfg["time"]["T"]
    return check_invariants(run.snapshots, run.diagnostics, cfg.U1().sup(T), cfg.f().sup(T), T)


def oracle_run(cfg: RunConfig):
    """Well-mixed kinetics with the constant parts of ``U1`` and ``f``."""
    import numpy as np

    p = cfg.params()
    u0 = np.zeros(p.M)
    u0[0] = cfg.U1().value
    t = cfg["time"]
    return ode_oracle(u0, p, t["T"], t["dt"], source=cfg.f().value, truncated=cfg["kinetics"]["truncated"])


def record_run(man: RunManifest, diagnostics, meshes: dict) -> None:
    man.guard = guard_summary(diagnostics)
    man.meshes = {k: mesh_stats(m) for k, m in meshes.items()}
    man.timing["elapsed"] = time.time() - man.timing["started"]
