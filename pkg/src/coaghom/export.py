"""Artifact writers: CSV tables, legacy VTK field dumps, JSON manifest and tensor files."""
from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .cell_problem import EffectiveTensor
from .geometry import TriMesh

CONVERGENCE_HEADER = ["epsilon", "h", "species", "e_v", "e_u", "ratio_v", "ratio_u"]


class ExportError(OSError):
    pass


def _versions() -> dict:
    from . import __version__

    return {
        "coaghom": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def mesh_stats(mesh: TriMesh) -> dict:
    if mesh.n_triangles == 0:
        return {"vertices": int(mesh.n_vertices), "triangles": 0}
    return {
        "vertices": int(mesh.n_vertices),
        "triangles": int(mesh.n_triangles),
        "area": float(mesh.area()),
        "max_edge": float(mesh.max_edge_length()),
    }


@dataclass
class RunManifest:
    """Record of one run, written when the run starts and finalized when it ends."""

    run_id: str
    command: str
    config: dict
    versions: dict = field(default_factory=_versions)
    threads: int = 1
    meshes: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    guard: dict = field(default_factory=dict)
    nonpaper_flags: list = field(default_factory=list)
    status: str = "running"
    files: list = field(default_factory=list)
    results: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)


def guard_summary(diagnostics) -> dict:
    g = [r["guard"] for r in diagnostics[1:]]
    return {"max": float(max(g)) if g else 0.0, "steps": len(g), "rejections": 0}


def _open(path: Path, mode: str = "w"):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, newline="")
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_json(path, data) -> Path:
    path = Path(path)
    with _open(path) as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_manifest(path, manifest: RunManifest) -> Path:
    return write_json(path, manifest.to_dict())


def write_csv(path, rows: list[dict], header: list[str] | None = None) -> Path:
    """Write dict rows; floats use ``repr`` so values survive a round trip exactly."""
    path = Path(path)
    header = header or (list(rows[0].keys()) if rows else [])
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_convergence_csv(path, report) -> Path:
    rows = [dict(zip(CONVERGENCE_HEADER, r.as_tuple())) for r in report.rows]
    return write_csv(path, rows, CONVERGENCE_HEADER)


def save_tensor(path, tensor: EffectiveTensor) -> Path:
    return write_json(path, tensor.to_dict())


def load_tensor(path) -> EffectiveTensor:
    return EffectiveTensor.from_dict(json.loads(Path(path).read_text()))


def write_vtk(path, mesh: TriMesh, point_data: dict[str, np.ndarray], title: str = "coaghom field") -> Path:
    """Legacy ASCII VTK unstructured grid of triangles with scalar point data."""
    path = Path(path)
    n, nt = mesh.n_vertices, mesh.n_triangles
    with _open(path) as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x!r} {y!r} 0.0\n")
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("5\n" * nt)
        if point_data:
            fh.write(f"POINT_DATA {n}\n")
            for name, vals in point_data.items():
                vals = np.asarray(vals, dtype=float)
                if vals.shape != (n,):
                    raise ValueError(f"field {name!r} has shape {vals.shape}, expected ({n},)")
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.write("\n".join(repr(float(v)) for v in vals))
                fh.write("\n")
    return path


def field_filename(run_id: str, kind: str, species: int | str, step: int | str, ext: str) -> str:
    return f"{run_id}/{kind}_{species}_{step}.{ext}"


@dataclass
class FieldDump:
    """One nodal field for VTK export; ``values`` has shape ``(n_z, n_vertices)``."""

    kind: str
    species: int
    step: int
    mesh: TriMesh
    values: np.ndarray


@dataclass
class Artifacts:
    manifest: RunManifest
    diagnostics: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    convergence: object = None
    tensor: EffectiveTensor | None = None
    invariants: object = None


def export(artifacts: Artifacts, outdir) -> list[Path]:
    """Write every artifact under ``outdir/{run_id}``; the manifest is written first and last."""
    outdir = Path(outdir)
    man = artifacts.manifest
    rid = man.run_id
    base = outdir / rid
    mpath = base / "manifest.json"
    write_manifest(mpath, man)
    written = []
    if artifacts.diagnostics:
        written.append(write_csv(outdir / field_filename(rid, "diagnostics", "all", "all", "csv"), artifacts.diagnostics))
    if artifacts.convergence is not None:
        written.append(write_convergence_csv(outdir / field_filename(rid, "convergence", "all", "all", "csv"), artifacts.convergence))
    if artifacts.tensor is not None:
        written.append(save_tensor(outdir / field_filename(rid, "tensor", "all", "all", "json"), artifacts.tensor))
    if artifacts.invariants is not None:
        written.append(write_csv(outdir / field_filename(rid, "invariants", "all", "all", "csv"), artifacts.invariants.to_rows()))
        man.results["invariants_passed"] = artifacts.invariants.passed
        man.results["audits"] = artifacts.invariants.audits
    for fd in artifacts.fields:
        vals = np.atleast_2d(fd.values)
        data = {f"layer_{k}": vals[k] for k in range(vals.shape[0])}
        written.append(write_vtk(outdir / field_filename(rid, fd.kind, fd.species, fd.step, "vtk"), fd.mesh, data))
    man.files = sorted(str(p.relative_to(outdir)) for p in written)
    if man.status == "running":
        man.status = "complete"
    man.timing.setdefault("finished", time.time())
    write_manifest(mpath, man)
    return [mpath] + written
