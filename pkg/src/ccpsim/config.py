"""Run configuration: YAML loading, defaults and eager validation.

Every default is written back into the resolved configuration so the run
manifest echoes exactly what was simulated.  Problems are reported with the
dotted path of the offending field and a diagnostic code.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass

import yaml

from .errors import ConfigError, InvariantError, MissingFileError, SchemaError
from .market import JumpSpec, RegimeConfig, TermStructure
from .network import MEMBER_TYPES

MODE_CHOICES = ("feedback", "default-only", "no-default", "all")

_JUMP_ZERO = {"intensity": 0.0, "log_mean": 0.0, "log_std": 0.0}

DEFAULTS = {
    "seed": 1,
    "paths": 10000,
    "horizon": 1.0,
    "step_days": 5,
    "days_per_year": 260,
    "mode": "all",
    "threads": 0,  # 0 = hardware parallelism
    "batch_size": 256,
    "reporting_currency": "USD",
    "xyz_equity": 2.0e11,
    "delta_limit": 0.1,
    "reweight_target": None,
    "positions_seed": 1,
    "data": {
        "categories": "categories.csv",
        "members": "members.csv",
        "aggregates": "aggregates.csv",
        "known_positions": "known_positions.csv",
    },
    "regime": {"thresholds": [0.05, 1.0], "multipliers": [1.0, 2.0], "mean_reversion": 1.0},
    "systemic_jump": dict(_JUMP_ZERO),
    "economies": {},
    "fx": {},
    "assets": {
        "systemic_beta": 1.0,
        "jump": dict(_JUMP_ZERO),
        "vol_multiple": {"diversified": 5.0, "markets-driven": 1.0, "trading-house": 0.3},
        "vol_bounds": [1.0e-4, 0.5],
    },
    "margin": {
        "var_level": 0.99,
        "history": 1000,
        "stressed_fraction": 0.1,
        "history_seed": 2,
        "add_on": 0.10,
        "vol_ratio_decay": 0.9,
        "vol_ratio_in_drain": False,
        "precision": 0.01,
    },
    "ccps": [],
    "calibration": {"paths": 20000, "seed": 3},
    "output": {"ccdf_points": 200, "margin_snapshot": False},
}

ECONOMY_DEFAULTS = {
    "forward_curve": 0.03,
    "theta1": 0.05,
    "theta2": 0.8,
    "vol": 0.008,
    "vol_ratio": 0.8,
    "correlation": -0.6,
    "systemic_beta": 1.0,
    "jump": dict(_JUMP_ZERO),
}

FX_DEFAULTS = {"spot": 1.0, "vol": 0.08, "systemic_beta": 0.5, "jump": dict(_JUMP_ZERO)}

CCP_DEFAULTS = {"skin_in_the_game": 0.0, "scenarios": "default"}

SCENARIO_DEFAULTS = {"parallel": 0.02, "slope": 0.01, "fx": 0.20}


def _merge(defaults, raw, path):
    """Recursively overlay ``raw`` on ``defaults``; unknown keys are schema errors."""
    if raw is None:
        return copy.deepcopy(defaults)
    if not isinstance(raw, dict):
        raise SchemaError(path or "<root>", f"expected a mapping, got {type(raw).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise SchemaError(sub, "unknown field")
        if isinstance(defaults[key], dict) and defaults[key] and key not in ("economies", "fx"):
            out[key] = _merge(defaults[key], value, sub)
        else:
            out[key] = value
    return out


def _number(value, path, lo=None, hi=None, lo_open=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(path, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise SchemaError(path, f"expected an integer, got {value!r}")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise InvariantError(path, f"must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and value > hi:
        raise InvariantError(path, f"must be <= {hi}")
    return int(value) if integer else float(value)


def parse_jump(raw, path) -> JumpSpec:
    d = _merge(_JUMP_ZERO, raw, path)
    return JumpSpec(_number(d["intensity"], f"{path}.intensity", lo=0),
                    _number(d["log_mean"], f"{path}.log_mean"),
                    _number(d["log_std"], f"{path}.log_std", lo=0))


def parse_regime(raw, path="regime") -> RegimeConfig:
    d = _merge(DEFAULTS["regime"], raw, path)
    try:
        thresholds = tuple(_number(v, f"{path}.thresholds[{i}]") for i, v in enumerate(d["thresholds"]))
        multipliers = tuple(_number(v, f"{path}.multipliers[{i}]") for i, v in enumerate(d["multipliers"]))
    except TypeError as exc:
        raise SchemaError(path, "thresholds and multipliers must be lists") from exc
    return RegimeConfig(thresholds, multipliers, _number(d["mean_reversion"], f"{path}.mean_reversion"))


@dataclass
class RunConfig:
    """Validated configuration; ``resolved`` holds the full echo with defaults."""

    resolved: dict
    base_dir: str

    def __getitem__(self, key):
        return self.resolved[key]

    @property
    def regime(self) -> RegimeConfig:
        return parse_regime(self.resolved["regime"])

    @property
    def n_steps(self) -> int:
        r = self.resolved
        return int(round(r["horizon"] * r["days_per_year"] / r["step_days"]))

    @property
    def dt(self) -> float:
        r = self.resolved
        return r["step_days"] / r["days_per_year"]

    def data_path(self, key: str) -> str:
        p = self.resolved["data"][key]
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def digest(self) -> str:
        """Hash of everything that can change results (worker count excluded)."""
        content = {k: v for k, v in self.resolved.items() if k != "threads"}
        text = json.dumps(content, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        resolved = copy.deepcopy(self.resolved)
        for k, v in kw.items():
            if v is not None:
                resolved[k] = v
        return validate_config(resolved, self.base_dir)


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise MissingFileError(path, "configuration file not found")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise SchemaError(path, f"not valid YAML: {exc}") from exc
    return validate_config(raw or {}, os.path.dirname(os.path.abspath(path)))


def validate_config(raw: dict, base_dir: str = ".") -> RunConfig:
    """Apply defaults and check every field eagerly."""
    r = _merge(DEFAULTS, raw, "")
    _number(r["seed"], "seed", lo=0, integer=True)
    _number(r["paths"], "paths", lo=1, integer=True)
    _number(r["horizon"], "horizon", lo=0, lo_open=True)
    _number(r["step_days"], "step_days", lo=0, lo_open=True)
    _number(r["days_per_year"], "days_per_year", lo=0, lo_open=True)
    steps = r["horizon"] * r["days_per_year"] / r["step_days"]
    if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
        raise InvariantError("horizon", f"horizon spans {steps:.6g} steps, not a whole positive number")
    if r["mode"] not in MODE_CHOICES:
        raise SchemaError("mode", f"expected one of {MODE_CHOICES}")
    _number(r["threads"], "threads", lo=0, integer=True)
    _number(r["batch_size"], "batch_size", lo=1, integer=True)
    if not isinstance(r["reporting_currency"], str):
        raise SchemaError("reporting_currency", "expected a currency code")
    _number(r["xyz_equity"], "xyz_equity", lo=0, lo_open=True)
    _number(r["delta_limit"], "delta_limit", lo=0, hi=1, lo_open=True)
    if r["reweight_target"] is not None:
        _number(r["reweight_target"], "reweight_target", lo=0, hi=1)
    _number(r["positions_seed"], "positions_seed", lo=0, integer=True)
    for key, value in r["data"].items():
        if not isinstance(value, str):
            raise SchemaError(f"data.{key}", "expected a file path")
    parse_regime(r["regime"])
    parse_jump(r["systemic_jump"], "systemic_jump")

    if not isinstance(r["economies"], dict) or not r["economies"]:
        raise SchemaError("economies", "at least one economy is required")
    econ = {}
    for ccy, spec in r["economies"].items():
        path = f"economies.{ccy}"
        d = _merge(ECONOMY_DEFAULTS, spec, path)
        for key in ("forward_curve", "vol"):
            TermStructure.parse(d[key], f"{path}.{key}")
        _number(d["theta1"], f"{path}.theta1", lo=0, lo_open=True)
        _number(d["theta2"], f"{path}.theta2", lo=0, lo_open=True)
        _number(d["vol_ratio"], f"{path}.vol_ratio", lo=0)
        _number(d["correlation"], f"{path}.correlation", lo=-1, hi=1)
        _number(d["systemic_beta"], f"{path}.systemic_beta")
        parse_jump(d["jump"], f"{path}.jump")
        econ[ccy] = d
    r["economies"] = econ
    if r["reporting_currency"] not in econ:
        raise InvariantError("reporting_currency", "must be one of the configured economies")

    if not isinstance(r["fx"], dict):
        raise SchemaError("fx", "expected a mapping of currency to FX parameters")
    fx = {}
    for ccy, spec in r["fx"].items():
        path = f"fx.{ccy}"
        if ccy not in econ or ccy == r["reporting_currency"]:
            raise InvariantError(path, "FX entries are needed for, and only for, non-reporting economies")
        d = _merge(FX_DEFAULTS, spec, path)
        _number(d["spot"], f"{path}.spot", lo=0, lo_open=True)
        TermStructure.parse(d["vol"], f"{path}.vol")
        _number(d["systemic_beta"], f"{path}.systemic_beta")
        parse_jump(d["jump"], f"{path}.jump")
        fx[ccy] = d
    missing = [c for c in econ if c != r["reporting_currency"] and c not in fx]
    if missing:
        raise InvariantError("fx", f"missing FX parameters for {missing}")
    r["fx"] = fx

    a = r["assets"]
    _number(a["systemic_beta"], "assets.systemic_beta")
    parse_jump(a["jump"], "assets.jump")
    vm = _merge(DEFAULTS["assets"]["vol_multiple"], a["vol_multiple"], "assets.vol_multiple")
    for t in MEMBER_TYPES:
        _number(vm[t], f"assets.vol_multiple.{t}", lo=0, lo_open=True)
    a["vol_multiple"] = vm
    lo, hi = (_number(v, f"assets.vol_bounds[{i}]", lo=0) for i, v in enumerate(a["vol_bounds"]))
    if not 0 < lo <= hi:
        raise InvariantError("assets.vol_bounds", "need 0 < lower <= upper")

    m = r["margin"]
    _number(m["var_level"], "margin.var_level", lo=0, hi=1, lo_open=True)
    if m["var_level"] >= 1:
        raise InvariantError("margin.var_level", "must be below 1")
    _number(m["history"], "margin.history", lo=2, integer=True)
    _number(m["stressed_fraction"], "margin.stressed_fraction", lo=0, hi=1)
    _number(m["history_seed"], "margin.history_seed", lo=0, integer=True)
    _number(m["add_on"], "margin.add_on", lo=0)
    _number(m["vol_ratio_decay"], "margin.vol_ratio_decay", lo=0, hi=1)
    if m["vol_ratio_decay"] >= 1:
        raise InvariantError("margin.vol_ratio_decay", "must be below 1")
    if not isinstance(m["vol_ratio_in_drain"], bool):
        raise SchemaError("margin.vol_ratio_in_drain", "expected true or false")
    _number(m["precision"], "margin.precision", lo=0, lo_open=True)

    if not isinstance(r["ccps"], list) or not r["ccps"]:
        raise SchemaError("ccps", "at least one CCP is required")
    ccps, seen = [], set()
    for i, spec in enumerate(r["ccps"]):
        path = f"ccps[{i}]"
        if not isinstance(spec, dict) or "id" not in spec:
            raise SchemaError(path, "each CCP needs an id")
        d = _merge({"id": None, **CCP_DEFAULTS}, spec, path)
        if d["id"] in seen:
            raise InvariantError(f"{path}.id", f"duplicate CCP id {d['id']!r}")
        seen.add(d["id"])
        _number(d["skin_in_the_game"], f"{path}.skin_in_the_game", lo=0)
        d["scenarios"] = _resolve_scenarios(d["scenarios"], econ, fx, f"{path}.scenarios")
        ccps.append(d)
    r["ccps"] = ccps

    c = r["calibration"]
    _number(c["paths"], "calibration.paths", lo=100, integer=True)
    _number(c["seed"], "calibration.seed", lo=0, integer=True)
    _number(r["output"]["ccdf_points"], "output.ccdf_points", lo=2, integer=True)
    return RunConfig(r, base_dir)


def _resolve_scenarios(raw, econ, fx, path):
    """Expand ``default`` (or a sizing mapping) into explicit stress scenarios.

    Defaults per economy: up and down parallel zero-rate shifts and
    steepeners; per foreign currency: up and down relative FX shocks.
    """
    if raw == "default" or (isinstance(raw, dict) and set(raw) <= set(SCENARIO_DEFAULTS)):
        sizes = _merge(SCENARIO_DEFAULTS, None if raw == "default" else raw, path)
        out = []
        for ccy in econ:
            for sign, tag in ((1, "up"), (-1, "down")):
                out.append({"id": f"{ccy}-parallel-{tag}", "rates": {ccy: {"parallel": sign * sizes["parallel"]}}})
                out.append({"id": f"{ccy}-steepen-{tag}", "rates": {ccy: {"slope": sign * sizes["slope"]}}})
        for ccy in fx:
            for sign, tag in ((1, "up"), (-1, "down")):
                out.append({"id": f"{ccy}-fx-{tag}", "fx": {ccy: sign * sizes["fx"]}})
        raw = out
    if not isinstance(raw, list):
        raise SchemaError(path, "expected 'default', a sizing mapping or a list of scenarios")
    if len(raw) < 2:
        raise InvariantError(path, "each CCP needs at least two stress scenarios")
    out = []
    for i, sc in enumerate(raw):
        p = f"{path}[{i}]"
        d = _merge({"id": None, "rates": {}, "fx": {}}, sc, p)
        if d["id"] is None:
            raise SchemaError(f"{p}.id", "scenario id required")
        rates = {}
        for ccy, shift in (d["rates"] or {}).items():
            if ccy not in econ:
                raise InvariantError(f"{p}.rates.{ccy}", "unknown economy")
            s = _merge({"parallel": 0.0, "slope": 0.0, "pivot": 2.0, "span": 10.0}, shift, f"{p}.rates.{ccy}")
            for k, v in s.items():
                _number(v, f"{p}.rates.{ccy}.{k}")
            rates[ccy] = s
        shocks = {}
        for ccy, shock in (d["fx"] or {}).items():
            if ccy not in fx:
                raise InvariantError(f"{p}.fx.{ccy}", "unknown FX currency")
            shocks[ccy] = _number(shock, f"{p}.fx.{ccy}", lo=-1, lo_open=True)
        out.append({"id": str(d["id"]), "rates": rates, "fx": shocks})
    return out


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.resolved, sort_keys=False)


def require_file(path: str, field: str):
    if not os.path.exists(path):
        raise MissingFileError(field, f"file not found: {path}")
    return path
