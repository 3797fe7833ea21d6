"""Scenario configs: JSON documents with ``"schema": 1``, validated before anything runs."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from .errors import ConfigError

SCHEMA_VERSION = 1

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_SEEDS = {"type": "array", "items": _NONNEG_INT, "minItems": 1}
_VEC = {"type": "array", "items": _NUM, "minItems": 1, "maxItems": 2}
_MAT = {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 1}, "minItems": 1}
_REGION = {
    "type": "object",
    "properties": {
        "box": {"type": "array", "items": _VEC, "minItems": 2, "maxItems": 2},
        "sublevel": _NUM,
    },
    "minProperties": 1,
    "maxProperties": 1,
    "additionalProperties": False,
}

TOP_SCHEMA = {
    "type": "object",
    "required": ["schema", "name", "experiments"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "output": {"type": "string", "minLength": 1},
        "grid": {
            "type": "object",
            "required": ["lower", "upper", "points"],
            "additionalProperties": False,
            "properties": {
                "dims": {"enum": [1, 2]},
                "lower": _NUM,
                "upper": _NUM,
                "points": {"type": "integer", "minimum": 8, "maximum": 4001},
            },
        },
        "constraints": {
            "type": "array",
            "items": {"type": "object", "required": ["preset"], "properties": {"preset": {"type": "string"}}},
        },
        "drift": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"D": _POS, "Q": _MAT},
        },
        "blanket": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dims": {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3},
                "seed": _NONNEG_INT,
                "b": {"type": "array", "items": _NUM, "minItems": 1},
                "generator": {
                    "type": "object",
                    "required": ["cov_bb", "cross_eta_b", "cross_mu_b", "cond_eta", "cond_mu"],
                    "additionalProperties": False,
                    "properties": {
                        "cov_bb": _MAT,
                        "cross_eta_b": _MAT,
                        "cross_mu_b": _MAT,
                        "cond_eta": _MAT,
                        "cond_mu": _MAT,
                        "mean": {"type": "array", "items": _NUM},
                    },
                },
            },
        },
        "experiments": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {"name": {"type": "string"}, "params": {"type": "object"}},
            },
        },
    },
}
_SHARED = ("grid", "constraints", "drift", "blanket")
_item = TOP_SCHEMA["properties"]["experiments"]["items"]["properties"]
for _k in _SHARED:
    _item[_k] = TOP_SCHEMA["properties"][_k]

_COMMON = {"multiplier": _NUM, "target": {"type": ["number", "null"]}, "preset": {"type": "string"}, "name": {"type": "string"}}


def _preset(required=(), **props):
    return {"type": "object", "required": list(required), "additionalProperties": False, "properties": {**_COMMON, **props}}


PRESET_SCHEMAS = {
    "linear": _preset(coef={"oneOf": [_NUM, _VEC]}),
    "quadratic": _preset(center=_NUM, scale=_POS),
    "quadratic_form": _preset(["precision"], precision=_MAT, center=_VEC),
    "indicator_complement": _preset(["region"], region=_REGION, kappa={"type": "number", "minimum": 0, "maximum": 1e6}),
    "constant": _preset(["c"], c=_NUM),
}


def _params(required=(), **props):
    return {"type": "object", "required": list(required), "additionalProperties": False, "properties": props}


_STEPS = {"type": "integer", "minimum": 1, "maximum": 100_000_000}
_TOL = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}

EXPERIMENT_SCHEMAS = {
    "maxent-solve": _params(tol=_TOL, max_iter=_POS_INT, expected_multipliers={"type": "array", "items": _NUM}, multiplier_tol=_TOL),
    "fp-relax": _params(
        ["t_final", "dt"],
        initial_mean={"oneOf": [_NUM, _VEC]},
        initial_var=_POS,
        t_final=_POS,
        dt=_POS,
        save_every=_POS_INT,
        expected_slope=_NUM,
        slope_window={"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
    ),
    "langevin-sample": _params(
        ["steps", "dt", "seeds"],
        x0=_VEC,
        steps=_STEPS,
        dt=_POS,
        seeds=_SEEDS,
        burn_in={"type": "integer", "minimum": 0},
        write_every=_POS_INT,
        region=_REGION,
        occupation_tol=_TOL,
    ),
    "ness-current": _params(
        ["steps", "dt", "seeds"],
        steps=_STEPS,
        dt=_POS,
        seeds=_SEEDS,
        burn_in={"type": "integer", "minimum": 0},
        tv_tol=_TOL,
        histogram_points={"type": "integer", "minimum": 8, "maximum": 401},
        current_min=_POS,
        divergence_tol=_TOL,
    ),
    "blanket-abil": _params(n_systems=_POS_INT, trials=_POS_INT, seeds=_SEEDS, tol=_TOL),
    "maxent-fep-dual": _params(b={"type": "array", "items": _NUM, "minItems": 1}, tol=_TOL, broken_perturbation=_POS, mismatch_min=_POS),
    "gauge-flows": _params(n_starts=_POS_INT, seeds=_SEEDS, step=_POS, tol=_TOL, orbit_start=_VEC, orbit_step=_POS, orbit_steps=_POS_INT),
    "trapping": _params(["region", "seeds"], region=_REGION, kappa={"type": "number", "minimum": 0, "maximum": 700}, n_traj=_POS_INT, horizon=_POS, dt=_POS, seeds=_SEEDS, tol=_TOL),
    "diagnostics-suite": _params(seeds=_SEEDS, inject_failure={"type": "boolean"}, steps=_STEPS),
}


@dataclass(frozen=True)
class Scenario:
    config: dict
    source: str

    @property
    def name(self) -> str:
        return self.config["name"]

    @property
    def experiments(self) -> list:
        return self.config["experiments"]

    @property
    def hash(self) -> str:
        return config_hash(self.config)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


_WS = re.compile(r"\s*")


def _locate(text: str) -> dict:
    """Line number of every value in a well-formed JSON document, keyed by path tuple."""
    dec = json.JSONDecoder()
    lines: dict = {}

    def skip(pos):
        return _WS.match(text, pos).end()

    def walk(pos, path):
        pos = skip(pos)
        lines[path] = text.count("\n", 0, pos) + 1
        ch = text[pos]
        if ch == "{":
            pos = skip(pos + 1)
            if text[pos] == "}":
                return pos + 1
            while True:
                key_line = text.count("\n", 0, pos) + 1
                key, pos = json.decoder.scanstring(text, pos + 1)
                pos = skip(pos)
                pos = walk(pos + 1, path + (key,))
                lines[path + (key,)] = key_line
                pos = skip(pos)
                if text[pos] == ",":
                    pos = skip(pos + 1)
                    continue
                return pos + 1
        if ch == "[":
            pos = skip(pos + 1)
            if text[pos] == "]":
                return pos + 1
            i = 0
            while True:
                pos = walk(pos, path + (i,))
                pos = skip(pos)
                if text[pos] == ",":
                    pos += 1
                    i += 1
                    continue
                return pos + 1
        return dec.raw_decode(text, pos)[1]

    walk(0, ())
    return lines


def _fmt_path(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _collect(validator_schema: dict, instance: Any, prefix: tuple) -> list:
    v = jsonschema.Draft202012Validator(validator_schema)
    return [(prefix + tuple(e.absolute_path), e.message) for e in v.iter_errors(instance)]


def effective_config(config: dict, experiment: dict) -> dict:
    """Scenario-level settings with the experiment's own grid/constraints/drift/blanket on top."""
    eff = {k: v for k, v in config.items() if k != "experiments"}
    eff.update({k: experiment[k] for k in _SHARED if k in experiment})
    return eff


def _validate_shared(config: dict, prefix: tuple) -> list:
    errs = []
    grid = config.get("grid")
    if grid is not None and not grid["lower"] < grid["upper"]:
        errs.append((prefix + ("grid", "upper"), f"must exceed grid.lower ({grid['lower']})"))
    for i, c in enumerate(config.get("constraints", [])):
        preset = c["preset"]
        if preset not in PRESET_SCHEMAS:
            errs.append((prefix + ("constraints", i, "preset"), f"unknown preset {preset!r}; valid presets: {', '.join(PRESET_SCHEMAS)}"))
            continue
        errs += _collect(PRESET_SCHEMAS[preset], c, prefix + ("constraints", i))
    q = config.get("drift", {}).get("Q")
    if q is not None and grid is not None:
        d = grid.get("dims", 1)
        if len(q) != d or any(len(r) != d for r in q):
            errs.append((prefix + ("drift", "Q"), f"must be a {d}x{d} matrix"))
        elif any(q[i][j] != -q[j][i] for i in range(d) for j in range(d)):
            errs.append((prefix + ("drift", "Q"), "must be antisymmetric"))
    return errs


_NEEDS_POTENTIAL = {"fp-relax", "langevin-sample", "ness-current", "maxent-solve", "gauge-flows", "trapping"}
_NEEDS_2D = {"gauge-flows", "ness-current", "trapping"}


def validate(config: Any) -> list:
    """All schema problems as ``(path, message)`` pairs; empty when valid."""
    errs = _collect(TOP_SCHEMA, config, ())
    if errs or not isinstance(config, dict):
        return errs
    errs += _validate_shared(config, ())
    for i, e in enumerate(config["experiments"]):
        where = ("experiments", i)
        name = e["name"]
        if name not in EXPERIMENT_SCHEMAS:
            errs.append((where + ("name",), f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENT_SCHEMAS)}"))
            continue
        errs += _collect(EXPERIMENT_SCHEMAS[name], e.get("params", {}), where + ("params",))
        eff = effective_config(config, e)
        own = [k for k in _SHARED if k in e]
        errs += [(p, m) for p, m in _validate_shared(eff, where) if p[len(where)] in own]
        if name in _NEEDS_POTENTIAL and ("grid" not in eff or not eff.get("constraints")):
            errs.append((where + ("name",), f"experiment {name!r} needs a grid and at least one constraint"))
        if name in _NEEDS_2D and "grid" in eff and eff["grid"].get("dims", 1) != 2:
            errs.append((where + ("name",), f"experiment {name!r} needs a two-dimensional grid"))
    return errs


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``dotted.path=value`` overrides; integers index into lists."""
    cfg = copy.deepcopy(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = cfg
        for i, part in enumerate(parts):
            last = i == len(parts) - 1
            if isinstance(node, list):
                if not part.isdigit() or int(part) >= len(node):
                    raise ConfigError(f"override {key!r}: {part!r} is not a valid index")
                part = int(part)
            elif not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {'.'.join(parts[:i])} is not an object or list")
            if last:
                node[part] = _parse_value(raw)
            else:
                if isinstance(node, dict) and part not in node:
                    node[part] = {}
                node = node[part]
    return cfg


def load(path, overrides=()) -> Scenario:
    """Read, override and validate a scenario; raises :class:`ConfigError` with line and field detail."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    config = apply_overrides(raw, overrides) if isinstance(raw, dict) else raw
    errs = validate(config)
    if errs:
        lines = _locate(text)
        msgs = []
        for p, m in sorted(errs, key=lambda e: [str(x) for x in e[0]]):
            line = None
            for k in range(len(p), -1, -1):
                if tuple(p[:k]) in lines:
                    line = lines[tuple(p[:k])]
                    break
            loc = f"{path}:{line}" if line is not None else str(path)
            msgs.append(f"{loc}: {_fmt_path(p)}: {m}")
        raise ConfigError("\n".join(msgs))
    return Scenario(config, str(path))
