"""Strict ``[section] key = value`` configuration files.

Values are Python literals (``64``, ``1.0``, ``"x2"``, ``[0.25, 0.5]``,
``true``/``false``); bare words are accepted for string keys. Unknown
sections or keys, duplicates and type mismatches are errors that carry the
line number.
"""

from __future__ import annotations

import ast
import hashlib
import json
import math
from dataclasses import dataclass, field

from .girsanov import contraction_alpha
from .model import REGISTRY

SCENARIOS = ("simulate", "spde_check", "fubini_check", "holder_check", "wp_holder_check",
             "girsanov_check", "contraction", "coupling_cost", "mollify_demo")

REQUIRED = object()


class ConfigError(ValueError):
    pass


# type tags: "int", "float", "str", "bool", "floats", "strs", "ints"; "?" suffix allows null
SCHEMA = {
    "run": {
        "scenario": ("str", REQUIRED),
        "seed": ("int", 0),
        "N": ("int", 1024),
        "n": ("int", 64),
        "T": ("float", 1.0),
        "replicates": ("int", 1),
        "output_dir": ("str", "mkvsim-out"),
    },
    "init": {
        "law": ("str", "gaussian"),
        "mean": ("float", 0.0),
        "var": ("float", 1.0),
    },
    "model": {
        "name": ("str", REQUIRED),
    },
    "diagnostic": {
        "q": ("float", 2.0),
        "p": ("float", 3.0),
        "lags": ("floats", [2.0 ** -k for k in range(6, 1, -1)]),
        "horizon": ("float?", None),
        "phi": ("strs", ["x", "x2", "sin"]),
        "bin_width": ("float?", None),
        "c_tv": ("float?", None),
        "c_bdg": ("float", 2.0),
        "iterations": ("int", 4),
        "perturbation": ("float", 0.5),
        "M": ("int", 64),
        "quadrature_points": ("int", 6),
        "mollify_n": ("ints", [1, 2, 4, 8]),
        "dump_trajectories": ("bool", True),
    },
    "assert": {
        "lower": ("float?", None),
        "upper": ("float?", None),
    },
}

# keys a scenario cannot run without, beyond the globally required ones
SCENARIO_REQUIRED = {"contraction": [("diagnostic", "c_tv")]}


def _model_schema(name: str, line: int) -> dict:
    if name not in REGISTRY:
        raise ConfigError(f"line {line}: unknown model {name!r}; choose from {sorted(REGISTRY)}")
    _, defaults = REGISTRY[name]
    return {k: ("int" if isinstance(v, int) and not isinstance(v, bool) else "float", v)
            for k, v in defaults.items()}


def _coerce(tag: str, value, key: str, line: int):
    optional = tag.endswith("?")
    tag = tag.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigError(f"line {line}: {key} must not be null")

    def bad():
        return ConfigError(f"line {line}: {key} expects {tag}, got {value!r}")

    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad()
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad()
        return float(value)
    if tag == "bool":
        if not isinstance(value, bool):
            raise bad()
        return value
    if tag == "str":
        if not isinstance(value, str):
            raise bad()
        return value
    if tag in ("floats", "ints", "strs"):
        if not isinstance(value, (list, tuple)) or not value:
            raise bad()
        inner = tag[:-1]
        try:
            return [_coerce(inner, v, key, line) for v in value]
        except ConfigError:
            raise bad() from None
    raise AssertionError(tag)


def _literal(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", "none"):
        return None
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw  # bare word; only string keys will accept it


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    model: str
    model_params: dict
    seed: int
    N: int
    n: int
    T: float
    replicates: int
    output_dir: str
    init: dict
    diagnostic: dict
    assertions: dict
    alpha: float | None = None
    source_lines: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.replicates)]

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario, "model": self.model, "model_params": self.model_params,
            "seed": self.seed, "N": self.N, "n": self.n, "T": self.T, "replicates": self.replicates,
            "output_dir": self.output_dir, "init": self.init, "diagnostic": self.diagnostic,
            "assert": self.assertions, "alpha": self.alpha,
        }

    def digest(self) -> str:
        """SHA-256 of the resolved configuration, output directory excluded."""
        body = self.as_dict()
        body.pop("output_dir")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> ScenarioConfig:
        body = {k: getattr(self, k) for k in self.__dataclass_fields__}
        body.update(changes)
        return ScenarioConfig(**body)


def parse_config(text: str) -> ScenarioConfig:
    raw: dict[str, dict[str, tuple]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header")
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            if section in raw:
                raise ConfigError(f"line {lineno}: duplicate section [{section}]")
            raw[section] = {}
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any section")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[section][key] = (_literal(value), lineno)

    resolved: dict[str, dict] = {}
    lines: dict[str, int] = {}
    for sec, schema in SCHEMA.items():
        given = dict(raw.get(sec, {}))
        if sec == "model":
            name_entry = given.get("name")
            if name_entry is None:
                raise ConfigError("missing required key 'name' in [model]")
            name = _coerce("str", name_entry[0], "name", name_entry[1])
            schema = {**schema, **_model_schema(name, name_entry[1])}
        out = {}
        for key, (value, lineno) in given.items():
            if key not in schema:
                raise ConfigError(f"line {lineno}: unknown key {key!r} in [{sec}]")
            out[key] = _coerce(schema[key][0], value, key, lineno)
            lines[f"{sec}.{key}"] = lineno
        for key, (_, default) in schema.items():
            if key not in out:
                if default is REQUIRED:
                    raise ConfigError(f"missing required key {key!r} in [{sec}]")
                out[key] = default
        resolved[sec] = out

    run = resolved["run"]
    scenario = run["scenario"]
    if scenario not in SCENARIOS:
        raise ConfigError(f"line {lines['run.scenario']}: unknown scenario {scenario!r}; choose from {list(SCENARIOS)}")
    for sec, key in SCENARIO_REQUIRED.get(scenario, []):
        if resolved[sec][key] is None:
            raise ConfigError(f"missing required key {key!r} in [{sec}] for scenario {scenario!r}")
    for key in ("N", "n", "replicates"):
        if run[key] < 1:
            raise ConfigError(f"line {lines.get('run.' + key, 0)}: {key} must be positive")
    if not run["T"] > 0:
        raise ConfigError(f"line {lines.get('run.T', 0)}: T must be positive")
    if resolved["init"]["law"] not in ("gaussian", "dirac"):
        raise ConfigError(f"line {lines['init.law']}: init law must be 'gaussian' or 'dirac'")

    model_params = {k: v for k, v in resolved["model"].items() if k != "name"}
    alpha = None
    diag = resolved["diagnostic"]
    if scenario == "contraction":
        alpha = contraction_alpha(diag["c_tv"], diag["c_bdg"], run["T"])
    if not math.isfinite(run["T"]):
        raise ConfigError("T must be finite")
    return ScenarioConfig(scenario, resolved["model"]["name"], model_params, run["seed"], run["N"], run["n"],
                          run["T"], run["replicates"], run["output_dir"], resolved["init"], diag,
                          resolved["assert"], alpha, lines)
