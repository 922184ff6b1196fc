"""Strict YAML run configurations.

A config is a nested mapping with a ``kind`` and three blocks: ``grid``,
``problem``, ``solver``, ``output`` (``study`` configs carry ``base`` and
``sweep`` instead of problem blocks).  Validation is strict: unknown keys
are rejected and all errors are reported at once, not just the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import yaml

from .grid import Grid

KINDS = (
    "elliptic",
    "qvi",
    "parabolic",
    "transport",
    "qvi-evolution",
    "sandpile",
    "verify",
    "study",
)

DEFAULT_SEED = 20240901


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(self.errors))


_FIELD_SPEC_KEYS = {"kind", "value", "expr", "nu"}

_PROBLEM_KEYS = {
    "elliptic": {"p", "delta", "f", "g", "reference"},
    "verify": {"p", "delta", "f", "g", "reference"},
    "qvi": {"p", "delta", "f", "constraint", "mode"},
    "parabolic": {"p", "delta", "f", "g", "u0", "T", "tau", "reference"},
    "transport": {"p", "delta", "f", "g", "u0", "T", "tau", "b", "c"},
    "qvi-evolution": {"p", "delta", "f", "u0", "T", "tau", "constraint", "certificate"},
    "sandpile": {"k", "f", "u0", "T", "tau", "delta", "b", "threshold"},
}

_REQUIRED = {
    "elliptic": {"p", "delta", "f", "g"},
    "verify": {"p", "delta", "f", "g"},
    "qvi": {"p", "delta", "f", "constraint"},
    "parabolic": {"p", "delta", "f", "g", "u0", "T", "tau"},
    "transport": {"p", "delta", "f", "g", "u0", "T", "tau", "b"},
    "qvi-evolution": {"p", "delta", "f", "u0", "T", "tau", "constraint"},
    "sandpile": {"k", "f", "u0", "T", "tau"},
}

_SOLVER_KEYS = {
    "eps_schedule", "tol_newton", "tol_feasibility", "max_newton", "seed",
    "oracle", "picard_tol", "picard_max_iter", "qvi_mode", "override",
}

_OUTPUT_KEYS = {"dir", "fields", "snapshot_every"}


@dataclass
class RunConfig:
    kind: str
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw.get("solver", {}).get("seed", DEFAULT_SEED))


def _check_block(block: Any, allowed: set, required: set, path: str, errors: list):
    if block is None:
        block = {}
    if not isinstance(block, dict):
        errors.append(f"{path}: expected a mapping")
        return
    for key in block:
        if key not in allowed:
            errors.append(f"{path}.{key}: unknown key")
    for key in required:
        if key not in block:
            errors.append(f"{path}.{key}: missing")


def _check_field_spec(spec: Any, path: str, errors: list, allow_scalar=True):
    if spec is None:
        errors.append(f"{path}: missing")
        return
    if isinstance(spec, (int, float)) and allow_scalar:
        return
    if not isinstance(spec, dict):
        errors.append(f"{path}: expected a number or a mapping")
        return
    for key in spec:
        if key not in _FIELD_SPEC_KEYS:
            errors.append(f"{path}.{key}: unknown key")
    kind = spec.get("kind")
    if kind not in ("constant", "expr"):
        errors.append(f"{path}.kind: must be 'constant' or 'expr'")
    if kind == "constant" and "value" not in spec:
        errors.append(f"{path}.value: missing for constant field")
    if kind == "expr" and not isinstance(spec.get("expr"), str):
        errors.append(f"{path}.expr: missing or not a string")


def validate(data: Any) -> list[str]:
    errors: list[str] = []
    if not isinstance(data, dict):
        return ["top level: expected a mapping"]
    kind = data.get("kind")
    if kind not in KINDS:
        errors.append(f"kind: must be one of {', '.join(KINDS)} (got {kind!r})")
        return errors
    if kind == "study":
        allowed = {"kind", "base", "sweep", "output", "solver"}
        for key in data:
            if key not in allowed:
                errors.append(f"{key}: unknown key")
        base = data.get("base")
        if not isinstance(base, dict):
            errors.append("base: missing or not a mapping")
        else:
            errors.extend(validate(base))
        sweep = data.get("sweep")
        if not isinstance(sweep, dict):
            errors.append("sweep: missing or not a mapping")
        else:
            for key in sweep:
                if key not in {"path", "values", "fit"}:
                    errors.append(f"sweep.{key}: unknown key")
            if not isinstance(sweep.get("path"), str):
                errors.append("sweep.path: missing or not a string")
            values = sweep.get("values")
            if not isinstance(values, list) or len(values) < 3:
                errors.append("sweep.values: need a list of at least 3 values")
            fit = sweep.get("fit")
            if fit is not None:
                if not isinstance(fit, dict) or set(fit) - {"x", "y"}:
                    errors.append("sweep.fit: expected mapping with keys x, y")
        _check_block(data.get("output"), _OUTPUT_KEYS, set(), "output", errors)
        return errors

    allowed_top = {"kind", "grid", "problem", "solver", "output"}
    for key in data:
        if key not in allowed_top:
            errors.append(f"{key}: unknown key")
    gridblock = data.get("grid")
    if not isinstance(gridblock, dict):
        errors.append("grid: missing or not a mapping")
    else:
        for key in gridblock:
            if key not in {"extents", "nodes"}:
                errors.append(f"grid.{key}: unknown key")
        ext = gridblock.get("extents")
        nodes = gridblock.get("nodes")
        if not isinstance(ext, list) or not 1 <= len(ext) <= 2:
            errors.append("grid.extents: need 1 or 2 [lo, hi] pairs")
        if not isinstance(nodes, list) or len(nodes) != (
            len(ext) if isinstance(ext, list) else 0
        ):
            errors.append("grid.nodes: need one node count per axis")
    prob = data.get("problem")
    _check_block(prob, _PROBLEM_KEYS[kind], _REQUIRED[kind], "problem", errors)
    if isinstance(prob, dict):
        for name in ("f", "g", "u0", "c", "reference"):
            if name in prob and name in _PROBLEM_KEYS[kind] and prob[name] is not None:
                _check_field_spec(prob[name], f"problem.{name}", errors)
        if kind in ("qvi", "qvi-evolution") and isinstance(prob.get("constraint"), dict):
            con = prob["constraint"]
            variant = con.get("variant")
            known = {
                "constant": {"variant", "k"},
                "nemytskii": {"variant", "expr", "nu"},
                "separated-energy": {"variant", "eta0", "delta0", "phi", "norm"},
            }
            if variant not in known:
                errors.append(
                    "problem.constraint.variant: must be one of "
                    + ", ".join(known)
                )
            else:
                for key in con:
                    if key not in known[variant]:
                        errors.append(f"problem.constraint.{key}: unknown key")
        elif kind in ("qvi", "qvi-evolution") and "constraint" in (prob or {}):
            errors.append("problem.constraint: expected a mapping")
    _check_block(data.get("solver"), _SOLVER_KEYS, set(), "solver", errors)
    _check_block(data.get("output"), _OUTPUT_KEYS, set(), "output", errors)
    return errors


def parse_config(text: str) -> RunConfig:
    """Parse and validate a YAML config; raises ConfigError listing every
    problem found (not just the first)."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML parse error: {exc}"]) from exc
    errors = validate(data)
    if errors:
        raise ConfigError(errors)
    return RunConfig(kind=data["kind"], raw=data)


def serialize_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.raw, sort_keys=True)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``--set path.to.key=value`` overrides (YAML-parsed values)."""
    out = data
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r}: expected key=value"])
        path, _, raw_val = item.partition("=")
        value = yaml.safe_load(raw_val)
        keys = path.split(".")
        node = out
        for key in keys[:-1]:
            if isinstance(node, list):
                node = node[int(key)]
            else:
                node = node.setdefault(key, {})
        last = keys[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return out


def build_grid(config: RunConfig) -> Grid:
    block = config.raw["grid"]
    extents = tuple((float(lo), float(hi)) for lo, hi in block["extents"])
    return Grid(extents, tuple(int(n) for n in block["nodes"]))


_EVAL_NAMES = {name: getattr(np, name) for name in (
    "sin", "cos", "tan", "exp", "log", "sqrt", "abs", "minimum", "maximum",
    "where", "pi", "e", "tanh", "cosh", "sinh", "sign",
)}


def eval_field_expr(expr: str, coords: tuple, t: float | None = None) -> np.ndarray:
    """Evaluate a field expression over coordinate arrays.  Available names:
    x (and y in 2D), t for time-dependent data, np, and a small whitelist of
    numpy functions."""
    names = dict(_EVAL_NAMES)
    names["np"] = np
    names["x"] = coords[0]
    if len(coords) > 1:
        names["y"] = coords[1]
    if t is not None:
        names["t"] = t
    out = eval(expr, {"__builtins__": {}}, names)  # trusted config input
    return np.asarray(out, dtype=float)


def node_field_from_spec(spec, grid: Grid, time_dependent: bool = False):
    """Node field (or callable of t) from a config field spec."""
    coords = grid.node_coords()
    if isinstance(spec, (int, float)):
        return np.full(grid.shape, float(spec))
    if spec["kind"] == "constant":
        return np.full(grid.shape, float(spec["value"]))
    expr = spec["expr"]
    if time_dependent and "t" in _expr_names(expr):
        return lambda t: np.broadcast_to(
            eval_field_expr(expr, coords, t=t), grid.shape
        ).astype(float)
    return np.broadcast_to(eval_field_expr(expr, coords), grid.shape).copy()


def bound_field_from_spec(spec, grid: Grid):
    from .constraints import BoundField

    centers = grid.cell_centers()
    if isinstance(spec, (int, float)):
        return BoundField.constant(grid, float(spec))
    if spec["kind"] == "constant":
        return BoundField.constant(grid, float(spec["value"]))
    vals = np.broadcast_to(
        eval_field_expr(spec["expr"], centers), grid.cell_shape
    ).copy()
    nu = spec.get("nu")
    if nu is None:
        nu = max(float(np.min(vals)), 1e-300)
        vals = np.maximum(vals, nu)  # machine floor for bounds touching zero
    return BoundField(vals, nu=float(nu))


def _expr_names(expr: str) -> set:
    import ast

    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError:
        return set()
    return {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
