"""
Scenario configuration: flat ``key = value`` text with dotted namespaces.

Example::

    scenario = eigen
    grid.n_points = 1001
    potential.harmonic.omega = 1.0

Blank lines and ``#`` comments are ignored. Every key is checked against a
fixed schema; parsing collects all problems before raising, so one pass over
a broken file reports everything that is wrong with it.

All randomness flows from ``seed``: trajectory ``i`` of a sampler run uses
stream ``(seed, i)``, realization ``i`` of an SED run uses stream
``(seed, i)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .core import Grid1D, PhysicalParams, RandomStreamSpec

__all__ = [
    "SCENARIOS",
    "ConfigError",
    "ScenarioConfig",
    "PotentialSpec",
    "parse_config",
    "emit_config",
    "default_config",
]

SCENARIOS = ("eigen", "evolve", "fields", "nelson", "brownian", "sed",
             "zpf-check", "balance", "verify")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class _Key:
    kind: type
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    rule: str = ""


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


_SCHEMA: Dict[str, _Key] = {
    "scenario": _Key(str, None, lambda s: s in SCENARIOS, "one of " + ", ".join(SCENARIOS)),
    "seed": _Key(int, 12345, lambda s: 0 <= s < 2**64, "a 64-bit unsigned integer"),
    "output_dir": _Key(str, "out"),
    "params.hbar": _Key(float, 1.0, _pos, "> 0"),
    "params.mass": _Key(float, 1.0, _pos, "> 0"),
    "params.charge": _Key(float, 0.0, _nonneg, ">= 0"),
    "params.light_speed": _Key(float, 1.0, _pos, "> 0"),
    "params.lambda_branch": _Key(int, 1, lambda s: s in (1, -1), "+1 or -1"),
    "params.diffusion_D": _Key(float, None, _nonneg, ">= 0 (omit for hbar/2m)"),
    "grid.x_min": _Key(float, -10.0),
    "grid.x_max": _Key(float, 10.0),
    "grid.n_points": _Key(int, 1001, lambda n: n >= 8, ">= 8"),
    "potential.harmonic.omega": _Key(float, None, _pos, "> 0"),
    "potential.box.L": _Key(float, None, _pos, "> 0"),
    "potential.custom.file": _Key(str, None),
    "integrator.dt": _Key(float, None, _pos, "> 0"),
    "integrator.steps": _Key(int, None, lambda n: n >= 1, ">= 1"),
    "integrator.order": _Key(int, 4, lambda n: n in (2, 4), "2 or 4"),
    "integrator.record_every": _Key(int, 10, lambda n: n >= 1, ">= 1"),
    "ensemble.n_traj": _Key(int, 10000, lambda n: n >= 1, ">= 1"),
    "ensemble.n_realizations": _Key(int, 32, lambda n: n >= 1, ">= 1"),
    "ensemble.dump_traj": _Key(int, 100, _nonneg, ">= 0"),
    "state.kind": _Key(str, "ground", lambda s: s in ("ground", "eigen", "superposition", "gaussian"),
                       "ground, eigen, superposition or gaussian"),
    "state.index": _Key(int, 0, _nonneg, ">= 0"),
    "state.sigma": _Key(float, 1.0, _pos, "> 0"),
    "state.x0": _Key(float, 0.0),
    "state.k0": _Key(float, 0.0),
    "eigen.k": _Key(int, 4, lambda n: n >= 1, ">= 1"),
    "brownian.friction": _Key(float, 1.0, _pos, "> 0"),
    "sed.omega0": _Key(float, 1.0, _pos, "> 0"),
    "sed.gamma": _Key(float, 1e-3, _pos, "> 0 (and <= 0.1 omega0)"),
    "sed.duration": _Key(float, None, _pos, "> 0 (omit for 40/gamma)"),
    "sed.dump_stride": _Key(int, 100, lambda n: n >= 1, ">= 1"),
    "zpf.omega_cutoff": _Key(float, None, _pos, "> 0 (omit for 20 omega0)"),
    "zpf.n_modes": _Key(int, None, lambda n: n >= 100, ">= 100 (omit to fit the duration)"),
    "verify.fast": _Key(bool, False),
}

_ALIASES = {"lambda": "params.lambda_branch", "params.lambda": "params.lambda_branch",
            "lambda_branch": "params.lambda_branch"}

_POTENTIAL_KEYS = ("potential.harmonic.omega", "potential.box.L", "potential.custom.file")

# per-scenario defaults layered over the schema defaults
_SCENARIO_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "eigen": {},
    "evolve": {"grid.x_min": -5.7, "grid.x_max": 5.7, "grid.n_points": 801,
               "state.kind": "superposition", "integrator.dt": 0.005, "integrator.steps": 400},
    "fields": {"grid.x_min": -5.4, "grid.x_max": 5.4, "grid.n_points": 801},
    "nelson": {"grid.x_min": -8.0, "grid.x_max": 8.0, "grid.n_points": 801,
               "integrator.dt": 1e-3, "integrator.steps": 10000},
    "brownian": {"grid.x_min": -8.0, "grid.x_max": 8.0, "grid.n_points": 801,
                 "params.lambda_branch": -1, "params.diffusion_D": 0.1,
                 "integrator.dt": 1e-3, "integrator.steps": 10000},
    "sed": {"ensemble.n_realizations": 1},
    "zpf-check": {"zpf.n_modes": 1000, "ensemble.n_realizations": 100,
                  "integrator.dt": 0.01},
    "balance": {},
    "verify": {},
}

_NEEDS_POTENTIAL = ("eigen", "evolve", "fields", "nelson", "brownian")


def _coerce(kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError("expected true or false")
    if kind is int:
        f = float(raw)
        if not f.is_integer():
            raise ValueError("expected an integer")
        return int(f)
    if kind is float:
        f = float(raw)
        if not math.isfinite(f):
            raise ValueError("expected a finite number")
        return f
    return raw


@dataclass(frozen=True)
class PotentialSpec:
    kind: str  # "harmonic", "box" or "custom"
    value: Any

    def build(self, grid: Grid1D, mass: float = 1.0):
        """Potential on ``grid`` (custom tables are read as ``x,V`` CSV and interpolated)."""
        from .core import ScalarField
        x = grid.x
        if self.kind == "harmonic":
            return ScalarField(grid, 0.5 * mass * self.value**2 * x**2)
        if self.kind == "box":
            return ScalarField.constant(grid, 0.0)
        table = np.loadtxt(self.value, delimiter=",", skiprows=1, ndmin=2)
        return ScalarField(grid, np.interp(x, table[:, 0], table[:, 1]))


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """A validated run description; ``values`` holds every key, defaults filled."""

    values: Mapping[str, Any]

    def __eq__(self, other):
        return isinstance(other, ScenarioConfig) and dict(self.values) == dict(other.values)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def scenario(self) -> str:
        return self.values["scenario"]

    @property
    def seed(self) -> RandomStreamSpec:
        return RandomStreamSpec(self.values["seed"])

    @property
    def output_dir(self) -> str:
        return self.values["output_dir"]

    @property
    def params(self) -> PhysicalParams:
        v = self.values
        return PhysicalParams(hbar=v["params.hbar"], mass=v["params.mass"],
                              charge=v["params.charge"], light_speed=v["params.light_speed"],
                              lambda_branch=v["params.lambda_branch"],
                              diffusion_D=v["params.diffusion_D"])

    @property
    def grid(self) -> Grid1D:
        v = self.values
        if self.potential is not None and self.potential.kind == "box":
            return Grid1D(0.0, self.potential.value, v["grid.n_points"])
        return Grid1D(v["grid.x_min"], v["grid.x_max"], v["grid.n_points"])

    @property
    def potential(self) -> Optional[PotentialSpec]:
        for key in _POTENTIAL_KEYS:
            if self.values.get(key) is not None:
                return PotentialSpec(key.split(".")[1], self.values[key])
        return None

    def to_json(self) -> str:
        return json.dumps(dict(self.values), sort_keys=True)


def _parse_lines(text: str):
    pairs, errors = [], []
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"line {n}: expected 'key = value', got {body!r}")
            continue
        key, raw = (s.strip() for s in body.split("=", 1))
        pairs.append((n, key, raw))
    return pairs, errors


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate config text.

    Raises
    ------
    ConfigError
        Listing every missing, unknown, malformed, out-of-range or
        conflicting key, each with its key path and a remedy.
    """
    pairs, errors = _parse_lines(text)
    given: Dict[str, Any] = {}
    for n, key, raw in pairs:
        key = _ALIASES.get(key, key)
        spec = _SCHEMA.get(key)
        if spec is None:
            errors.append(f"line {n}: unknown key {key!r}; remove it or check the spelling")
            continue
        if key in given:
            errors.append(f"line {n}: duplicate key {key!r}; keep one assignment")
            continue
        try:
            value = _coerce(spec.kind, raw)
        except ValueError as exc:
            errors.append(f"line {n}: {key} = {raw!r}: {exc}")
            continue
        if spec.check is not None and not spec.check(value):
            if key == "params.lambda_branch":
                errors.append(f"line {n}: lambda_branch must be +1 or -1 (got {value})")
            else:
                errors.append(f"line {n}: {key} = {value!r} out of range; must be {spec.rule}")
            continue
        given[key] = value

    scenario = given.get("scenario")
    if "scenario" not in given and not any("scenario" in e for e in errors):
        errors.append("missing key 'scenario'; add 'scenario = <one of "
                      + ", ".join(SCENARIOS) + ">'")

    pots = [k for k in _POTENTIAL_KEYS if k in given]
    if len(pots) > 1:
        errors.append("ambiguous potential: " + " and ".join(pots)
                      + " are mutually exclusive; keep exactly one")

    values = {k: s.default for k, s in _SCHEMA.items()}
    values.update(_SCENARIO_DEFAULTS.get(scenario, {}))
    values.update(given)
    if scenario in _NEEDS_POTENTIAL and not pots:
        values["potential.harmonic.omega"] = 1.0
    if scenario is not None:
        errors.extend(_scenario_errors(scenario, values, given))
    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(values)


def _scenario_errors(scenario, values, given):
    errors = []
    if values["grid.x_max"] <= values["grid.x_min"]:
        errors.append("grid.x_max must exceed grid.x_min")
    if scenario in ("evolve", "nelson", "brownian"):
        for key in ("integrator.dt", "integrator.steps"):
            if values[key] is None:
                errors.append(f"missing key {key!r} for scenario {scenario}")
    if scenario == "eigen" and values["eigen.k"] > values["grid.n_points"] // 4:
        errors.append("eigen.k must be <= grid.n_points/4; lower eigen.k or refine the grid")
    if scenario == "brownian" and values["params.lambda_branch"] != -1:
        errors.append("scenario brownian needs params.lambda_branch = -1")
    if scenario == "zpf-check":
        if values["integrator.dt"] is None:
            errors.append("missing key 'integrator.dt' for scenario zpf-check")
    custom = values.get("potential.custom.file")
    if custom is not None:
        import os
        if not os.path.exists(custom):
            errors.append(f"potential.custom.file {custom!r} does not exist")
    return errors


def emit_config(cfg: ScenarioConfig) -> str:
    """Config text that parses back to ``cfg``; unset optional keys are omitted."""
    lines = []
    for key in _SCHEMA:
        value = cfg.values.get(key)
        if value is None:
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def default_config(scenario: str, **overrides) -> ScenarioConfig:
    """Defaults for ``scenario`` with dotted-key overrides (underscored dots allowed)."""
    text = [f"scenario = {scenario}"]
    for k, v in overrides.items():
        text.append(f"{k.replace('__', '.')} = {v}")
    return parse_config("\n".join(text))
