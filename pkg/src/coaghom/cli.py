"""Command line entry point: ``coaghom {cell,micro,macro,converge,oracle,check}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, load_config, resolve_config
from .convergence import ConvergenceError
from .export import Artifacts, ExportError, FieldDump, export, mesh_stats, write_manifest
from .geometry import GeometryError, MeshError
from .problem import SolverFailure, StepRejected

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_INVARIANT = 0, 2, 3, 4


def _load(path):
    """Accept either a run configuration or a manifest written by an earlier run."""
    if path is None:
        return resolve_config({"schema_version": 1})
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError):
        return load_config(p)
    if isinstance(data, dict) and "command" in data and "config" in data:
        return resolve_config(data["config"])
    return load_config(p)


def _field_dumps(run, kind: str, mesh, every: int, attr: str, reduce=None) -> list:
    out = []
    if every <= 0:
        return out
    for step, s in enumerate(run.snapshots):
        if step % every and step != len(run.snapshots) - 1:
            continue
        arr = getattr(s, attr)
        if reduce is not None:
            arr = reduce(arr)
        for m in range(arr.shape[0]):
            out.append(FieldDump(kind, m + 1, step, mesh, arr[m]))
    return out


def cmd_cell(cfg, args, man):
    tensor, ws, solid, _ = harness.effective_tensor(cfg, args.threads)
    man.meshes = {"cell_solid": mesh_stats(solid)}
    man.results["tensor"] = tensor.to_dict()
    man.results["corrector_residuals"] = [w.residual for w in ws]
    print(np.array2string(tensor.matrix, precision=8))
    fields = [FieldDump("corrector", w.direction, 0, solid, w.values) for w in ws if w.direction < 3]
    return Artifacts(man, tensor=tensor, fields=fields), EXIT_OK


def cmd_micro(cfg, args, man):
    mcfg, run = harness.micro_run(cfg, args.threads)
    harness.record_run(man, run.diagnostics, {"solid": mcfg.solid, "inclusions": mcfg.inclusions})
    every = cfg["output"]["vtk_every"]
    fields = _field_dumps(run, "v", mcfg.solid, every, "v") + _field_dumps(run, "u", mcfg.inclusions, every, "u")
    rep = harness.invariants_for(cfg, run)
    return Artifacts(man, diagnostics=run.diagnostics, fields=fields, invariants=rep), EXIT_OK


def cmd_macro(cfg, args, man):
    tensor = harness.effective_tensor(cfg, args.threads)[0]
    mc, run = harness.macro_run(cfg, args.threads, tensor=tensor)
    sysm = mc.system()
    harness.record_run(man, run.diagnostics, {"macro": sysm.mesh, "cell_inclusion": mc.cell})
    every = cfg["output"]["vtk_every"]
    area = sysm.mX.sum()

    def cell_mean(u):
        return (u @ sysm.mX) / area if area > 0 else u[..., 0] * 0.0

    fields = _field_dumps(run, "v", sysm.mesh, every, "v") + _field_dumps(run, "u_mean", sysm.mesh, every, "u", cell_mean)
    rep = harness.invariants_for(cfg, run)
    return Artifacts(man, diagnostics=run.diagnostics, fields=fields, tensor=tensor, invariants=rep), EXIT_OK


def cmd_converge(cfg, args, man):
    tensor = harness.effective_tensor(cfg, args.threads)[0]
    try:
        report = harness.convergence_study(cfg, args.threads, tensor=tensor)
    except ConvergenceError as exc:
        man.status = "failed"
        man.results["error"] = str(exc)
        print(f"error: {exc}", file=sys.stderr)
        return Artifacts(man, convergence=exc.report, tensor=tensor), EXIT_SOLVER
    for r in report.rows:
        rv = "" if r.ratio_v is None else f"  ratio_v={r.ratio_v:.3f}"
        print(f"eps={r.epsilon:<8g} species={r.species}  e_v={r.e_v:.4e}  e_u={r.e_u:.4e}{rv}")
    return Artifacts(man, convergence=report, tensor=tensor), EXIT_OK


def cmd_oracle(cfg, args, man):
    times, traj = harness.oracle_run(cfg)
    rows = [{"t": float(t), **{f"u_{m + 1}": float(x[m]) for m in range(len(x))}} for t, x in zip(times, traj)]
    print("u(T) =", np.array2string(traj[-1], precision=12))
    man.results["final"] = traj[-1].tolist()
    return Artifacts(man, diagnostics=rows), EXIT_OK


def cmd_check(cfg, args, man):
    if args.solver == "macro":
        arts, _ = cmd_macro(cfg, args, man)
    else:
        arts, _ = cmd_micro(cfg, args, man)
    rep = arts.invariants
    for c in rep.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<20} margin={c.margin:.3e}  {c.detail}")
    for k, v in rep.audits.items():
        print(f"audit {k} = {v}")
    code = EXIT_INVARIANT if (args.strict and not rep.passed) else EXIT_OK
    return arts, code


COMMANDS = {
    "cell": (cmd_cell, "solve the cell problems and print the effective tensor"),
    "micro": (cmd_micro, "integrate the epsilon-scale problem"),
    "macro": (cmd_macro, "integrate the two-scale homogenized problem"),
    "converge": (cmd_converge, "epsilon sweep against the two-scale limit"),
    "oracle": (cmd_oracle, "well-mixed kinetics reference (RK4)"),
    "check": (cmd_check, "run a solver and audit the solution invariants"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration or a previous manifest.json")
    common.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (default: %(default)s)")
    common.add_argument("--seed", type=int, default=None, help="recorded in the manifest; no numeric effect")
    parser = argparse.ArgumentParser(prog="coaghom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "check":
            p.add_argument("--strict", action="store_true", help="exit 4 if any invariant fails")
            p.add_argument("--solver", choices=["micro", "macro"], default="micro")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    man = harness.new_manifest(cfg, args.command, args.threads, args.seed)
    func = COMMANDS[args.command][0]
    try:
        write_manifest(Path(args.out) / man.run_id / "manifest.json", man)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        arts, code = func(cfg, args, man)
    except (StepRejected, SolverFailure) as exc:
        man.status = "failed"
        man.results["error"] = str(exc)
        export(Artifacts(man), args.out)
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, GeometryError, MeshError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if code == EXIT_INVARIANT:
        man.status = "invariant failure"
    export(arts, args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
