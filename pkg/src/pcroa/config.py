"""Experiment configuration: one JSON file describes one system and its pipeline.

The raw document is schema-checked with ``jsonschema`` (unknown keys are
rejected at every level) before any polynomial is parsed.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .basis import BasisFamily
from .errors import ConfigError, ParseError
from .expand import DEFAULT_MAX_RANK, ParamSpec, StochSystem
from .mvpoly import parse

_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_posint = {"type": "integer", "minimum": 1}
_even = {"type": "integer", "minimum": 0, "multipleOf": 2}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_param = {
    "oneOf": [
        _obj({"name": {"type": "string"}, "dist": {"const": "uniform"}, "low": _num, "high": _num},
             ["name", "dist", "low", "high"]),
        _obj({"name": {"type": "string"}, "dist": {"const": "gaussian"}, "mean": _num,
              "std": {"type": "number", "minimum": 0}}, ["name", "dist", "mean", "std"]),
        _obj({"name": {"type": "string"}, "dist": {"const": "pce"}, "coeffs": _vec},
             ["name", "dist", "coeffs"]),
    ]
}

SCHEMA = _obj({
    "name": {"type": "string"},
    "description": {"type": "string"},
    "system": _obj({
        "states": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "params": {"type": "array", "items": _param},
        "rhs": {"type": "array", "items": {"type": "string"}, "minItems": 1},
    }, ["states", "rhs"]),
    "pce": _obj({
        "family": {"enum": ["legendre", "hermite", None]},
        "p": {"type": "integer", "minimum": 0},
        "max_rank": {"type": "integer", "minimum": 2},
        "cache_dir": {"type": ["string", "null"]},
    }, ["p"]),
    "simulate": _obj({
        "mean_start": _vec,
        "t_end": {"type": "number", "exclusiveMinimum": 0},
        "n_points": {"type": "integer", "minimum": 2},
        "probe_p": {"type": ["integer", "null"], "minimum": 0},
    }, ["mean_start"]),
    "equilibrium": _obj({
        "mean_start": _vec,
        "t_max": {"type": "number", "exclusiveMinimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
    }, ["mean_start"]),
    "roa": _obj({
        "deg_V": {"enum": [2, 4]},
        "deg_s1": {"oneOf": [_even, {"type": "null"}]},
        "deg_s2": {"oneOf": [_even, {"type": "null"}]},
        "l_coeff": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": _posint,
        "obj_tol": {"type": "number", "exclusiveMinimum": 0},
        "verify_tol": {"type": "number", "exclusiveMinimum": 0},
        "eps_cap": {"type": "number", "exclusiveMinimum": 0},
        "quadratic_warm_start": {"type": "boolean"},
    }),
    "recover": _obj({
        "sigma2": {"oneOf": [_num, _mat]},
        "sweep": {"type": "array", "items": {"oneOf": [_num, _mat]}, "minItems": 1},
        "deg_s1": _even,
        "outer_bounds": _obj({
            "start": _vec,
            "params": {"type": "array", "items": {"type": "object",
                                                  "additionalProperties": _num}, "minItems": 1},
        }, ["start", "params"]),
    }),
    "validate": _obj({
        "n_initials": {"type": "integer", "minimum": 0},
        "n_realizations": {"type": "integer", "minimum": 0},
        "conv_radius": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "t_end": {"type": "number", "exclusiveMinimum": 0},
        "outer_scales": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 1}},
        "outer_n": {"type": "integer", "minimum": 1},
    }),
    "output": _obj({
        "directory": {"type": "string"},
        "formats": {"type": "array", "items": {"enum": ["csv", "json", "png"]}, "uniqueItems": True},
    }),
}, ["system", "pce"])


DEFAULTS = {
    "simulate": {"t_end": 20.0, "n_points": 401, "probe_p": None},
    "equilibrium": {"t_max": 1e3, "tol": 1e-6},
    "roa": {"deg_V": 2, "deg_s1": None, "deg_s2": None, "l_coeff": 1e-4, "max_iter": 40,
            "obj_tol": 1e-3, "verify_tol": 1e-6, "eps_cap": 1e-2, "quadratic_warm_start": True},
    "recover": {"deg_s1": 0},
    "validate": {"n_initials": 1000, "n_realizations": 20, "conv_radius": 1e-3, "seed": 0,
                 "t_end": 200.0, "outer_scales": [], "outer_n": 72},
    "output": {"directory": "out", "formats": ["csv", "json", "png"]},
}


@dataclass
class Config:
    raw: dict
    system: StochSystem
    family: BasisFamily
    source: str

    @property
    def name(self):
        return self.raw.get("name", Path(self.source).stem)

    @property
    def p(self) -> int:
        return int(self.raw["pce"]["p"])

    @property
    def max_rank(self) -> int:
        return int(self.raw["pce"].get("max_rank", DEFAULT_MAX_RANK))

    @property
    def cache_dir(self):
        return self.raw["pce"].get("cache_dir")

    def section(self, key) -> dict:
        out = dict(DEFAULTS.get(key, {}))
        out.update(self.raw.get(key, {}))
        return out

    def sweep(self) -> list:
        """Initial covariances to recover, as n x n arrays (a scalar ``s`` means ``s I``)."""
        rec = self.raw.get("recover", {})
        items = rec.get("sweep")
        if items is None:
            items = [rec.get("sigma2", 0.0)]
        return [as_covariance(v, self.system.n) for v in items]

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def as_covariance(v, n: int) -> np.ndarray:
    if isinstance(v, (int, float)):
        return float(v) * np.eye(n)
    m = np.array(v, dtype=float)
    if m.shape != (n, n):
        raise ConfigError(f"covariance must be {n}x{n}, got shape {m.shape}", module="cli",
                          operation="load_config", code="shape")
    if not np.allclose(m, m.T, atol=0.0):
        raise ConfigError("covariance must be symmetric", module="cli", operation="load_config",
                          code="not_symmetric")
    return m


def config_hash(raw: dict) -> str:
    text = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def bundled(name: str) -> Path:
    return Path(str(resources.files("pcroa") / "data" / name))


def resolve(path) -> Path:
    """``path`` itself, or a bundled config of the same file name."""
    p = Path(path)
    if p.exists():
        return p
    b = bundled(p.name)
    if b.exists():
        return b
    raise ConfigError(f"config file {path} not found", module="cli", operation="load_config",
                      code="missing")


def _validate(raw):
    v = jsonschema.Draft7Validator(SCHEMA)
    errs = sorted(v.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errs:
        e = errs[0]
        where = "/".join(str(k) for k in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}", module="cli",
                          operation="load_config", code="schema")


def build(raw: dict, source: str = "<memory>") -> Config:
    _validate(raw)
    sysd = raw["system"]
    states = list(sysd["states"])
    params = []
    for item in sysd.get("params", []):
        kind = item["dist"]
        if kind == "uniform":
            spec = ParamSpec.uniform(item["low"], item["high"])
        elif kind == "gaussian":
            spec = ParamSpec.gaussian(item["mean"], item["std"])
        else:
            spec = ParamSpec.pce(item["coeffs"])
        params.append((item["name"], spec))
    if len(sysd["rhs"]) != len(states):
        raise ConfigError(f"{len(sysd['rhs'])} rhs expressions for {len(states)} states",
                          module="cli", operation="load_config", code="dimension")
    pnames = [nm for nm, _ in params]
    rhs = []
    for k, text in enumerate(sysd["rhs"]):
        try:
            rhs.append(parse(text, states, pnames))
        except ParseError as exc:
            raise ParseError(f"system/rhs/{k}: {exc}", position=exc.position, module="cli",
                             operation="load_config") from exc
    system = StochSystem(tuple(states), params, rhs)
    fam = raw["pce"].get("family")
    family = BasisFamily.parse(fam) if fam else system.natural_family()
    for key in ("simulate", "equilibrium"):
        if key in raw and len(raw[key]["mean_start"]) != len(states):
            raise ConfigError(f"{key}/mean_start needs {len(states)} entries", module="cli",
                              operation="load_config", code="dimension")
    cfg = Config(raw, system, family, source)
    cfg.sweep()  # shape checks
    return cfg


def load_config(path, overrides: dict | None = None) -> Config:
    """Read, apply dotted-key ``overrides`` (e.g. ``{"pce.p": 2}``) and validate."""
    src = resolve(path)
    try:
        raw = json.loads(src.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{src}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
                          module="cli", operation="load_config", code="json") from exc
    raw = apply_overrides(raw, overrides or {})
    return build(raw, str(src))


def apply_overrides(raw: dict, overrides: dict) -> dict:
    raw = copy.deepcopy(raw)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = raw
        *head, last = dotted.split(".")
        for k in head:
            node = node.setdefault(k, {})
        node[last] = value
    return raw
