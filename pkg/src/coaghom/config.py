"""JSON run configuration: schema validation, defaults and object builders."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .geometry import GeometryError, build_cell_geometry
from .kinetics import KineticParams, KineticsError
from .problem import DataField, ZGrid

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "geometry": {"inclusion": {"type": "disk", "center": [0.5, 0.5], "radius": 0.25}, "h_cell": 0.1},
    "domain": {"rect": [0.0, 0.0, 1.0, 1.0], "epsilon": 0.25, "L": 0.0, "n_z": 1},
    "kinetics": {
        "M": 2,
        "a": "constant",
        "b": "constant",
        "a_scale": 1.0,
        "b_scale": 1.0,
        "D": 1.0,
        "D_tilde": 1.0,
        "d": 1.0,
        "c": 1.0,
        "truncation": None,
        "truncated": False,
        "allow_nonpaper": False,
    },
    "data": {
        "U1": {"kind": "constant", "value": 1.0},
        "f": {"kind": "constant", "value": 0.0},
        "sampling": "oscillating",
    },
    "time": {"T": 1.0, "dt": 0.01, "snapshot_every": 1},
    "macro": {"n": [32, 32]},
    "cell": {"h": 0.05, "refine": 0, "tol": 1e-12},
    "convergence": {"epsilons": [0.5, 0.25, 0.125]},
    "solver": {"linear": "direct", "cg_tol": 1e-13},
    "output": {"run_id": "run", "vtk_every": 0},
}

_number = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_species = {"oneOf": [_number, {"type": "array", "items": _number, "minItems": 1}]}
_kernel = {
    "oneOf": [
        {"enum": ["constant", "sum", "product"]},
        {"type": "array", "items": {"type": "array", "items": _number}},
    ]
}
_field = {
    "oneOf": [
        _number,
        {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["constant", "gaussian", "cell_periodic"]},
                "value": _number,
                "center": {"type": "array", "items": _number, "minItems": 2, "maxItems": 2},
                "width": _pos,
                "offset": {"type": "number", "minimum": 0},
                "amplitude": _number,
                "decay": _number,
            },
        },
    ]
}


def _section(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "geometry": _section(
            {
                "inclusion": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "type": {"enum": ["disk", "polygon", "none"]},
                        "center": {"type": "array", "items": _number, "minItems": 2, "maxItems": 2},
                        "radius": _number,
                        "vertices": {"type": "array", "items": {"type": "array", "items": _number}},
                    },
                },
                "h_cell": _pos,
            }
        ),
        "domain": _section(
            {
                "rect": {"type": "array", "items": _number, "minItems": 4, "maxItems": 4},
                "epsilon": _pos,
                "L": {"type": "number", "minimum": 0},
                "n_z": {"type": "integer", "minimum": 1},
            }
        ),
        "kinetics": _section(
            {
                "M": {"type": "integer", "minimum": 2},
                "a": _kernel,
                "b": _kernel,
                "a_scale": _number,
                "b_scale": _number,
                "D": _species,
                "D_tilde": _species,
                "d": _species,
                "c": _species,
                "truncation": {"oneOf": [{"type": "null"}, _pos]},
                "truncated": {"type": "boolean"},
                "allow_nonpaper": {"type": "boolean"},
            }
        ),
        "data": _section(
            {"U1": _field, "f": _field, "sampling": {"enum": ["oscillating", "cell_average"]}}
        ),
        "time": _section(
            {"T": {"type": "number", "minimum": 0}, "dt": _pos, "snapshot_every": {"type": "integer", "minimum": 1}}
        ),
        "macro": _section({"n": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}}),
        "cell": _section({"h": _pos, "refine": {"type": "integer", "minimum": 0}, "tol": _pos}),
        "convergence": _section({"epsilons": {"type": "array", "items": _pos, "minItems": 1}}),
        "solver": _section({"linear": {"enum": ["direct", "cg"]}, "cg_tol": _pos}),
        "output": _section({"run_id": {"type": "string", "minLength": 1}, "vtk_every": {"type": "integer", "minimum": 0}}),
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("inclusion", "U1", "f"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration (defaults applied) plus builders for solver inputs."""

    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    def geometry(self):
        return build_cell_geometry(self.raw["geometry"]["inclusion"])

    def params(self) -> KineticParams:
        k = self.raw["kinetics"]
        return KineticParams.build(
            M=k["M"],
            a=k["a"],
            b=k["b"],
            D=k["D"],
            D_tilde=k["D_tilde"],
            d=k["d"],
            c=k["c"],
            a_scale=k["a_scale"],
            b_scale=k["b_scale"],
            truncation=k["truncation"],
            allow_nonpaper=k["allow_nonpaper"],
        )

    def U1(self) -> DataField:
        return DataField.from_dict(self.raw["data"]["U1"])

    def f(self) -> DataField:
        return DataField.from_dict(self.raw["data"]["f"])

    def zgrid(self) -> ZGrid:
        d = self.raw["domain"]
        return ZGrid(d["n_z"], d["L"])

    def solver_kwargs(self) -> dict:
        s = self.raw["solver"]
        return {
            "linear_solver": s["linear"],
            "cg_tol": s["cg_tol"],
            "truncated": self.raw["kinetics"]["truncated"],
            "snapshot_every": self.raw["time"]["snapshot_every"],
        }

    def micro_config(self, epsilon: float | None = None, cell_meshes=None, threads: int = 1):
        from .micro import make_micro_config

        d, t = self.raw["domain"], self.raw["time"]
        return make_micro_config(
            self.geometry(),
            tuple(d["rect"]),
            d["epsilon"] if epsilon is None else epsilon,
            self.raw["geometry"]["h_cell"],
            self.params(),
            self.U1(),
            self.f(),
            t["T"],
            t["dt"],
            n_z=d["n_z"],
            L=d["L"],
            cell_meshes=cell_meshes,
            sampling=self.raw["data"]["sampling"],
            threads=threads,
            **self.solver_kwargs(),
        )

    def macro_config(self, tensor, cell_mesh, threads: int = 1):
        from .macro import MacroConfig

        d, t = self.raw["domain"], self.raw["time"]
        kw = self.solver_kwargs()
        return MacroConfig(
            tuple(d["rect"]),
            tuple(self.raw["macro"]["n"]),
            cell_mesh,
            tensor,
            self.params(),
            self.U1(),
            self.f(),
            t["T"],
            t["dt"],
            zgrid=self.zgrid(),
            threads=threads,
            **kw,
        )

    def nonpaper_flags(self) -> list[str]:
        flags = list(self.params().nonpaper_flags)
        if self.raw["kinetics"]["truncated"]:
            flags.append("truncated coagulation terms")
        if self.raw["geometry"]["inclusion"].get("type") == "polygon":
            flags.append("polygonal inclusion (non-smooth interface)")
        return flags


def resolve_config(data: dict) -> RunConfig:
    """Validate ``data`` against the schema, apply defaults and check physical validity."""
    if not isinstance(data, dict):
        raise ConfigError("<root>: configuration must be a JSON object")
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        if e.validator == "additionalProperties":
            raise ConfigError(f"{_path(e)}: unknown key ({e.message})")
        raise ConfigError(f"{_path(e)}: {e.message}")
    raw = _merge(DEFAULTS, data)
    cfg = RunConfig(raw)
    try:
        cfg.geometry()
    except GeometryError as exc:
        raise ConfigError(f"geometry.inclusion: {exc}") from exc
    try:
        cfg.params()
    except KineticsError as exc:
        raise ConfigError(f"kinetics: {exc}") from exc
    try:
        cfg.U1(), cfg.f(), cfg.zgrid()
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from exc
    for name in ("U1", "f"):
        fld = cfg.U1() if name == "U1" else cfg.f()
        if fld.value < 0 or (fld.kind == "cell_periodic" and abs(fld.amplitude) > 1):
            raise ConfigError(f"data.{name}: field must be non-negative")
    eps = raw["convergence"]["epsilons"]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ConfigError("convergence.epsilons: must be strictly decreasing")
    return cfg


def load_config(path) -> RunConfig:
    """Read and resolve a JSON configuration file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"<file>: {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<file>: {path} is not valid JSON ({exc})") from exc
    return resolve_config(data)
