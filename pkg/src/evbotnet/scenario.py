"""Declarative scenario files, scenario execution and report emission.

A scenario is an INI file (see ``docs/scenario-format.md``). Running it
builds the demand, applies the attack, solves the network and returns a
:class:`RunReport`, which serializes to JSON and to plot-ready CSV.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import demand as dm
from .attack_cascade import (
    Actor,
    AttackKind,
    AttackScenario,
    CascadePolicy,
    apply_attack,
    cascade,
    feeder_branch,
    solve_series,
    trace_to_dict,
)
from .grid_model import (
    CaseSemanticError,
    CaseSyntaxError,
    Network,
    bundled_case_path,
    load_buses,
    parse_case,
    scale_loads,
)
from .powerflow import ConvergenceError, SolveOptions, check_limits

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "CaseError",
    "ScenarioConfig",
    "LotConfig",
    "RunReport",
    "load_config",
    "parse_config",
    "run_scenario",
    "check_references",
    "resolve_output_dir",
    "emit_plotdata",
    "write_outputs",
    "bundled_scenario",
    "BUNDLED_SCENARIOS",
    "OUTPUT_DIR_ENV",
    "REPORT_SCHEMA",
    "PLOT_TAGS",
]

OUTPUT_DIR_ENV = "EVBOTNET_OUTPUT_DIR"
REPORT_SCHEMA = "evbotnet.report/1"
BUNDLED_SCENARIOS = (
    "baseline", "fig3_attack", "fig4", "fig6", "fig7", "fig8_cascade10pct", "cascade5pct",
)


class ConfigError(ValueError):
    """Invalid scenario file. The message names the offending key."""


class CaseError(ValueError):
    """The referenced case file is missing or does not parse."""


# --------------------------------------------------------------------------
# schema

_ARRIVAL_MODELS = {
    "commercial_day": dm.COMMERCIAL_DAY,
    "residential_fcdc": dm.RESIDENTIAL_FCDC,
    "residential_home": dm.RESIDENTIAL_HOME,
}
_SHAPES = {"residential": dm.RESIDENTIAL_SHAPE, "commercial": dm.COMMERCIAL_SHAPE, "flat": None}
_ATTACK_KINDS = {
    "none": None,
    "synchronized_fcdc_start": AttackKind.SynchronizedFcdcStart,
    "uniform_load_scale": AttackKind.UniformLoadScale,
}

# section -> {key: parser}; parsers raise ValueError on bad input
_SCHEMA_KEYS = {
    "scenario": {"name", "description", "mode", "case", "seed", "timestep_minutes", "horizon_steps"},
    "solver": {"tol", "max_iter", "enforce_q_limits"},
    "base": {"shape", "scale"},
    "heat_pumps": {"buses", "per_bus", "cop", "rated_kw", "ua_per_sqft", "capacitance_per_sqft",
                   "setpoint_low", "setpoint_high", "outdoor_mean_c", "outdoor_swing_c"},
    "lot": {"bus", "stations", "charger_kw", "battery_kwh", "arrival_model", "occupancy",
            "sessions_csv"},
    "attack": {"kind", "t_attack", "targets", "factor", "actor", "scale_q"},
    "limits": {"feeder_limit_mw", "v_min", "v_max"},
    "cascade": {"rating_basis", "margin", "dispatch", "on_nonconvergence", "strict_capacity"},
    "outputs": {"directory", "formats"},
}
_REQUIRED = {"scenario": {"name", "mode", "case"}}


@dataclass(frozen=True)
class LotConfig:
    name: str
    bus: int
    stations: int
    charger_kw: float = 50.0
    battery_kwh: float = 36.0
    arrival_model: str = "residential_fcdc"
    occupancy: float = 1.0
    sessions_csv: str | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    mode: str  # "distribution" or "transmission"
    case_path: str
    description: str = ""
    seed: int = 0
    timestep_minutes: int = 15
    horizon_steps: int = 96
    solve: SolveOptions = SolveOptions()
    base_shape: str = "residential"
    base_scale: float = 1.0
    hp_buses: tuple | None = None  # None: no heat pumps; () never used
    hp_per_bus: int = 0
    hp_params: dict = field(default_factory=dict)
    outdoor_mean_c: float = -5.0
    outdoor_swing_c: float = 4.0
    lots: tuple = ()
    attack_kind: str = "none"
    t_attack: int | None = None
    attack_targets: str | tuple = "load"
    attack_factor: float = 1.0
    attack_actor: str = "ev_botnet"
    attack_scale_q: bool = True
    feeder_limit_mw: float | None = None
    v_bounds: tuple | None = None
    cascade: CascadePolicy = CascadePolicy()
    output_dir: str = "evbotnet-out"
    formats: tuple = ("json", "csv")
    source_text: str = ""
    base_dir: str = "."


def _err(section, key, msg):
    return ConfigError(f"{section}.{key}: {msg}" if key else f"[{section}]: {msg}")


def _get(sec, section, key, conv, default=None):
    if key not in sec:
        return default
    raw = sec[key].strip()
    try:
        return conv(raw)
    except (ValueError, KeyError) as exc:
        raise _err(section, key, f"invalid value {raw!r} ({exc})") from None


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _int_list(raw: str) -> tuple:
    return tuple(int(x) for x in raw.replace(",", " ").split())


def _choice(options):
    def conv(raw):
        if raw not in options:
            raise ValueError(f"expected one of {sorted(options)}")
        return raw
    return conv


def _positive(conv):
    def inner(raw):
        v = conv(raw)
        if not v > 0:
            raise ValueError("must be positive")
        return v
    return inner


def _non_negative(conv):
    def inner(raw):
        v = conv(raw)
        if v < 0:
            raise ValueError("must be non-negative")
        return v
    return inner


def parse_config(text: str, base_dir: str = ".") -> ScenarioConfig:
    """Parse and fully validate scenario text. Raises :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"syntax: {exc}") from None

    lots_raw = []
    for section in cp.sections():
        kind = section.split(".", 1)[0] if section.startswith("lot.") else section
        if kind not in _SCHEMA_KEYS:
            raise _err(section, None, "unknown section")
        for key in cp[section]:
            if key not in _SCHEMA_KEYS[kind]:
                raise _err(section, key, "unknown key")
        if kind == "lot":
            lots_raw.append(section)
    for section, keys in _REQUIRED.items():
        if section not in cp:
            raise _err(section, None, "missing section")
        for key in keys:
            if key not in cp[section]:
                raise _err(section, key, "missing key")

    empty = {}
    sc = cp["scenario"]
    mode = _get(sc, "scenario", "mode", _choice({"distribution", "transmission"}))
    timestep = _get(sc, "scenario", "timestep_minutes", _positive(int), 15)
    if 60 % timestep:
        raise _err("scenario", "timestep_minutes", "must divide 60")
    horizon = _get(sc, "scenario", "horizon_steps", _positive(int), 24 * 60 // timestep)

    so = cp["solver"] if "solver" in cp else empty
    try:
        solve = SolveOptions(
            tol=_get(so, "solver", "tol", float, 1e-8),
            max_iter=_get(so, "solver", "max_iter", int, 30),
            enforce_q_limits=_get(so, "solver", "enforce_q_limits", _bool, True),
        )
    except ValueError as exc:
        raise _err("solver", None, str(exc)) from None

    bs = cp["base"] if "base" in cp else empty
    hp = cp["heat_pumps"] if "heat_pumps" in cp else None
    hp_buses, hp_params = None, {}
    if hp is not None:
        hp_buses = _get(hp, "heat_pumps", "buses",
                        lambda r: "load" if r == "load" else _int_list(r), "load")
        for key, conv in (("cop", float), ("rated_kw", float), ("ua_per_sqft", float),
                          ("capacitance_per_sqft", float), ("setpoint_low", float),
                          ("setpoint_high", float)):
            v = _get(hp, "heat_pumps", key, conv)
            if v is not None:
                hp_params[key] = v
        try:
            dm.HeatPumpSpec(bus=0, **hp_params)
        except ValueError as exc:
            raise _err("heat_pumps", None, str(exc)) from None

    lots = []
    for section in lots_raw:
        s = cp[section]
        for key in ("bus", "stations"):
            if key not in s and "sessions_csv" not in s:
                raise _err(section, key, "missing key")
        lots.append(LotConfig(
            name=section.split(".", 1)[1],
            bus=_get(s, section, "bus", _non_negative(int), -1),
            stations=_get(s, section, "stations", _positive(int), 1),
            charger_kw=_get(s, section, "charger_kw", _positive(float), 50.0),
            battery_kwh=_get(s, section, "battery_kwh", _positive(float), 36.0),
            arrival_model=_get(s, section, "arrival_model", _choice(set(_ARRIVAL_MODELS)),
                               "residential_fcdc"),
            occupancy=_get(s, section, "occupancy", float, 1.0),
            sessions_csv=_get(s, section, "sessions_csv", str),
        ))
        if not 0 <= lots[-1].occupancy <= 1:
            raise _err(section, "occupancy", "must lie in [0, 1]")

    at = cp["attack"] if "attack" in cp else empty
    kind = _get(at, "attack", "kind", _choice(set(_ATTACK_KINDS)), "none")
    t_attack = _get(at, "attack", "t_attack", lambda r: dm.step_of(r, timestep))
    if kind == "synchronized_fcdc_start":
        if t_attack is None:
            raise _err("attack", "t_attack", "required for a synchronized start")
        if not 0 <= t_attack < horizon:
            raise _err("attack", "t_attack", "outside the horizon")
        if mode != "distribution":
            raise _err("attack", "kind", "a synchronized start needs distribution mode")
    if kind == "uniform_load_scale" and mode != "transmission":
        raise _err("attack", "kind", "a load-scale attack needs transmission mode")
    targets = _get(at, "attack", "targets",
                   lambda r: r if r in ("load", "all") else _int_list(r), "load")
    factor = _get(at, "attack", "factor", _non_negative(float), 1.0)
    actor = _get(at, "attack", "actor", _choice({a.value for a in Actor}), "ev_botnet")

    lim = cp["limits"] if "limits" in cp else empty
    v_min = _get(lim, "limits", "v_min", float)
    v_max = _get(lim, "limits", "v_max", float)
    if (v_min is None) != (v_max is None):
        raise _err("limits", "v_min" if v_min is None else "v_max", "v_min and v_max go together")
    if v_min is not None and not v_min < v_max:
        raise _err("limits", "v_min", "must be below v_max")

    cs = cp["cascade"] if "cascade" in cp else empty
    try:
        policy = CascadePolicy(
            rating_basis=_get(cs, "cascade", "rating_basis", str, "case"),
            margin=_get(cs, "cascade", "margin", float, 0.93),
            dispatch=_get(cs, "cascade", "dispatch", str, "slack"),
            on_nonconvergence=_get(cs, "cascade", "on_nonconvergence", str, "dead"),
            strict_capacity=_get(cs, "cascade", "strict_capacity", _bool, False),
        )
    except ValueError as exc:
        raise _err("cascade", None, str(exc)) from None

    out = cp["outputs"] if "outputs" in cp else empty
    formats = _get(out, "outputs", "formats",
                   lambda r: tuple(x.strip() for x in r.split(",") if x.strip()), ("json", "csv"))
    bad = set(formats) - {"json", "csv"}
    if bad:
        raise _err("outputs", "formats", f"unknown format(s) {sorted(bad)}")

    return ScenarioConfig(
        name=sc["name"].strip(),
        mode=mode,
        case_path=sc["case"].strip(),
        description=sc.get("description", "").strip(),
        seed=_get(sc, "scenario", "seed", int, 0),
        timestep_minutes=timestep,
        horizon_steps=horizon,
        solve=solve,
        base_shape=_get(bs, "base", "shape", _choice(set(_SHAPES)), "residential"),
        base_scale=_get(bs, "base", "scale", _non_negative(float), 1.0),
        hp_buses=hp_buses,
        hp_per_bus=_get(hp, "heat_pumps", "per_bus", _non_negative(int), 0) if hp else 0,
        hp_params=hp_params,
        outdoor_mean_c=_get(hp, "heat_pumps", "outdoor_mean_c", float, -5.0) if hp else -5.0,
        outdoor_swing_c=_get(hp, "heat_pumps", "outdoor_swing_c", float, 4.0) if hp else 4.0,
        lots=tuple(lots),
        attack_kind=kind,
        t_attack=t_attack,
        attack_targets=targets,
        attack_factor=factor,
        attack_actor=actor,
        attack_scale_q=_get(at, "attack", "scale_q", _bool, True),
        feeder_limit_mw=_get(lim, "limits", "feeder_limit_mw", _positive(float)),
        v_bounds=None if v_min is None else (v_min, v_max),
        cascade=policy,
        output_dir=out.get("directory", "evbotnet-out").strip(),
        formats=formats,
        source_text=text,
        base_dir=base_dir,
    )


def bundled_scenario(name: str):
    """Handle to a scenario shipped with the package."""
    if not name.endswith(".scn"):
        name += ".scn"
    return resources.files("evbotnet") / "data" / "scenarios" / name


def load_config(path) -> ScenarioConfig:
    """Read a scenario file, or a bundled scenario by name (e.g. ``fig3_attack``)."""
    p = Path(path)
    if not p.exists():
        stem = str(path).removesuffix(".scn")
        if stem in BUNDLED_SCENARIOS:
            ref = bundled_scenario(stem)
            return parse_config(ref.read_text(encoding="utf-8"), base_dir=".")
        raise ConfigError(f"scenario file {path} not found")
    return parse_config(p.read_text(encoding="utf-8"), base_dir=str(p.parent))


# --------------------------------------------------------------------------
# report


@dataclass
class RunReport:
    name: str
    mode: str
    provenance: dict
    timestep_minutes: int
    times: list  # "HH:MM" per step; empty in transmission mode
    series: dict  # column name -> list, one entry per step
    violations: list  # dicts with step, time, kind, id, id_ext, value, limit
    cascade: dict | None
    summary: dict
    schema: str = REPORT_SCHEMA

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "name": self.name,
            "mode": self.mode,
            "provenance": self.provenance,
            "timestep_minutes": self.timestep_minutes,
            "times": self.times,
            "series": self.series,
            "violations": self.violations,
            "cascade": self.cascade,
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            name=d["name"], mode=d["mode"], provenance=d["provenance"],
            timestep_minutes=d["timestep_minutes"], times=d["times"], series=d["series"],
            violations=d["violations"], cascade=d["cascade"], summary=d["summary"],
        )

    @classmethod
    def read(cls, path) -> "RunReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _read_case(cfg: ScenarioConfig) -> tuple[Network, str]:
    name = cfg.case_path
    if name.removesuffix(".m") in ("case33bw", "case39") and not (Path(cfg.base_dir) / name).exists():
        text = bundled_case_path(name).read_text(encoding="utf-8")
        stem = name.removesuffix(".m")
    else:
        p = Path(name) if Path(name).is_absolute() else Path(cfg.base_dir) / name
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise CaseError(f"cannot read case {p}: {exc}") from None
        stem = p.stem
    try:
        return parse_case(text, name=stem), text
    except (CaseSyntaxError, CaseSemanticError) as exc:
        raise CaseError(f"{name}: {exc}") from None


def _check_buses(cfg: ScenarioConfig, net: Network):
    n = net.n_bus
    for lot in cfg.lots:
        if lot.sessions_csv is None and not 0 <= lot.bus < n:
            raise ConfigError(f"lot.{lot.name}.bus: unknown bus {lot.bus}")
    if isinstance(cfg.hp_buses, tuple):
        bad = [b for b in cfg.hp_buses if not 0 <= b < n]
        if bad:
            raise ConfigError(f"heat_pumps.buses: unknown bus(es) {bad}")
    if isinstance(cfg.attack_targets, tuple):
        bad = [b for b in cfg.attack_targets if not 0 <= b < n]
        if bad:
            raise ConfigError(f"attack.targets: unknown bus(es) {bad}")


def check_references(cfg: ScenarioConfig) -> Network:
    """Load the case and check every bus the scenario names. Returns the case."""
    net, _ = _read_case(cfg)
    _check_buses(cfg, net)
    return net


def _hhmm(step: int, dt: int) -> str:
    m = step * dt
    return f"{m // 60:02d}:{m % 60:02d}"


def _targets(cfg: ScenarioConfig, net: Network):
    if cfg.attack_targets == "load":
        return frozenset(load_buses(net))
    if cfg.attack_targets == "all":
        return None
    return frozenset(cfg.attack_targets)


def _sessions(cfg: ScenarioConfig, rng: np.random.Generator, net: Network):
    sessions = []
    for lot in cfg.lots:
        if lot.sessions_csv is not None:
            p = Path(lot.sessions_csv)
            p = p if p.is_absolute() else Path(cfg.base_dir) / p
            try:
                got = dm.read_sessions_csv(p, battery_kwh=lot.battery_kwh, max_kw=lot.charger_kw)
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"lot.{lot.name}.sessions_csv: {exc}") from None
            bad = [s.vehicle_id for s in got if not 0 <= s.bus < net.n_bus]
            if bad:
                raise ConfigError(f"lot.{lot.name}.sessions_csv: unknown bus for {bad[:3]}")
            sessions += got
            continue
        model = replace(_ARRIVAL_MODELS[lot.arrival_model], occupancy=lot.occupancy)
        sessions += dm.generate_parking_sessions(
            rng, lot.stations, lot.bus, model,
            horizon=cfg.horizon_steps, timestep_minutes=cfg.timestep_minutes,
            max_kw=lot.charger_kw, battery_kwh=lot.battery_kwh, prefix=f"{lot.name}-",
        )
    return sessions


def _min_voltage(net: Network, sols):
    bus = [int(np.argmin(s.v_mag)) for s in sols]
    return [float(s.v_mag[b]) for s, b in zip(sols, bus)], [net.external(b) for b in bus]


def _run_distribution(cfg: ScenarioConfig, net: Network) -> tuple[dict, list, dict]:
    dt, horizon = cfg.timestep_minutes, cfg.horizon_steps
    rng = np.random.default_rng(cfg.seed)
    base = dm.base_profile(net, horizon, dt, _SHAPES[cfg.base_shape], scale=cfg.base_scale)
    addends = []
    if cfg.hp_buses is not None and cfg.hp_per_bus > 0:
        buses = ([b.id for b in net.buses if b.p_load > 0] if cfg.hp_buses == "load"
                 else list(cfg.hp_buses))
        specs = dm.generate_heat_pumps(rng, buses, cfg.hp_per_bus, **cfg.hp_params)
        outdoor = dm.outdoor_temperature(horizon, dt, cfg.outdoor_mean_c, cfg.outdoor_swing_c)
        addends.append(dm.heat_pump_profile(specs, outdoor, net.n_bus, dt))
    sessions = _sessions(cfg, rng, net)
    for s in sessions:
        if s.departure > horizon:
            raise ConfigError(f"session {s.vehicle_id} departs after the horizon")
    normal_ev = dm.ev_fleet_profile(sessions, net.n_bus, horizon, dt)
    if cfg.attack_kind == "synchronized_fcdc_start":
        scenario = AttackScenario(
            AttackKind.SynchronizedFcdcStart, cfg.t_attack, _targets(cfg, net),
            compromised_actor=Actor(cfg.attack_actor),
        )
        attacked = apply_attack(scenario, sessions, horizon=horizon, timestep_minutes=dt,
                                n_bus=net.n_bus)
    else:
        attacked = sessions
    attack_ev = dm.ev_fleet_profile(attacked, net.n_bus, horizon, dt)

    feeder = feeder_branch(net)
    limits = {feeder: cfg.feeder_limit_mw} if cfg.feeder_limit_mw is not None else {}
    series, violations = {}, []
    for label, ev in (("normal", normal_ev), ("attack", attack_ev)):
        prof = dm.compose(base, addends + [ev])
        sols = solve_series(net, prof.p_mw, prof.q_mvar, cfg.solve)
        for t, sol in enumerate(sols):
            if not sol.converged:
                raise ConvergenceError(
                    f"{label} run: power flow did not converge at {_hhmm(t, dt)} "
                    f"(mismatch {sol.max_mismatch:.3g} pu)"
                )
        series[f"feeder_flow_mw_{label}"] = [
            float(max(abs(s.p_from[feeder]), abs(s.p_to[feeder]))) for s in sols
        ]
        series[f"load_mw_{label}"] = [float(x) for x in prof.total_mw()]
        series[f"ev_mw_{label}"] = [float(x) for x in ev.total_mw()]
        vmin, vbus = _min_voltage(net, sols)
        series[f"vmin_pu_{label}"] = vmin
        series[f"vmin_bus_{label}"] = [net.canonical(b) for b in vbus]
        series[f"vmin_bus_ext_{label}"] = vbus
        for t, sol in enumerate(sols):
            rep = check_limits(net, sol, limits, cfg.v_bounds)
            for k, loading in rep.overloaded_branches:
                violations.append({
                    "run": label, "step": t, "time": _hhmm(t, dt), "kind": "overload",
                    "id": k, "id_ext": f"{net.external(net.branches[k].from_bus)}-"
                                      f"{net.external(net.branches[k].to_bus)}",
                    "value": series[f"feeder_flow_mw_{label}"][t] if k == feeder
                    else float(max(sol.s_from[k], sol.s_to[k])),
                    "loading": loading,
                })
            for kind, rows in (("undervoltage", rep.undervoltage_buses),
                               ("overvoltage", rep.overvoltage_buses)):
                for b, vm in rows:
                    violations.append({
                        "run": label, "step": t, "time": _hhmm(t, dt), "kind": kind,
                        "id": b, "id_ext": str(net.external(b)), "value": vm, "loading": None,
                    })

    summary = {
        "feeder_branch": feeder,
        "feeder_branch_ext": f"{net.external(net.branches[feeder].from_bus)}-"
                             f"{net.external(net.branches[feeder].to_bus)}",
        "feeder_limit_mw": cfg.feeder_limit_mw,
        "v_bounds": list(cfg.v_bounds) if cfg.v_bounds else None,
        "n_sessions": len(sessions),
        "attack_step": cfg.t_attack,
        "attack_time": None if cfg.t_attack is None else _hhmm(cfg.t_attack, dt),
    }
    for label in ("normal", "attack"):
        flow = series[f"feeder_flow_mw_{label}"]
        summary[f"max_feeder_flow_mw_{label}"] = max(flow)
        summary[f"min_voltage_pu_{label}"] = min(series[f"vmin_pu_{label}"])
        if cfg.feeder_limit_mw is not None:
            summary[f"steps_over_feeder_limit_{label}"] = [
                t for t, f in enumerate(flow) if f > cfg.feeder_limit_mw
            ]
    if cfg.t_attack is not None:
        t = cfg.t_attack
        before, after = series["load_mw_normal"][t], series["load_mw_attack"][t]
        summary["load_increase_pct_at_attack"] = 100.0 * (after - before) / before if before else None
    return series, violations, summary


def _run_transmission(cfg: ScenarioConfig, net: Network) -> tuple[dict, list, dict, dict]:
    if cfg.attack_kind == "uniform_load_scale":
        scenario = AttackScenario(
            AttackKind.UniformLoadScale, target_buses=_targets(cfg, net),
            factor=cfg.attack_factor, compromised_actor=Actor(cfg.attack_actor),
        )
        if cfg.attack_scale_q:
            attacked = apply_attack(scenario, net)
        else:
            targets = None if scenario.target_buses is None else sorted(scenario.target_buses)
            attacked = scale_loads(net, cfg.attack_factor, targets, scale_q=False)
    else:
        attacked = net
    trace = cascade(attacked, cfg.solve, cfg.cascade, reference=net)
    tdict = trace_to_dict(net, trace)
    tdict["policy"] = {
        "rating_basis": cfg.cascade.rating_basis,
        "margin": cfg.cascade.margin if cfg.cascade.rating_basis == "base_flow" else None,
        "dispatch": cfg.cascade.dispatch,
        "on_nonconvergence": cfg.cascade.on_nonconvergence,
        "strict_capacity": cfg.cascade.strict_capacity,
    }
    violations = []
    summary = {
        "original_load_mw": net.total_load(),
        "attacked_load_mw": trace.original_load_mw,
        "attack_factor": cfg.attack_factor if cfg.attack_kind == "uniform_load_scale" else 1.0,
        "n_rounds": len(trace.rounds),
        "round_sizes": trace.round_sizes,
        "total_deactivated": len(trace.total_deactivated),
        "n_final_islands": len(trace.final_islands),
        "outage_mw": trace.outage_mw,
        "outage_fraction_of_original": trace.outage_mw / net.total_load() if net.total_load() else 0.0,
        "rating_note": "case-file MVA ratings" if cfg.cascade.rating_basis == "case"
        else f"capacity = (1 + {cfg.cascade.margin}) x pre-attack MVA flow",
    }
    return {}, violations, summary, tdict


def run_scenario(cfg: ScenarioConfig, output_dir=None, write: bool = True) -> RunReport:
    """Execute a validated scenario. Deterministic for a given config and seed.

    Outputs go to ``output_dir``, else ``$EVBOTNET_OUTPUT_DIR``, else the
    directory named in the scenario. ``write=False`` skips the files.
    """
    net, case_text = _read_case(cfg)
    _check_buses(cfg, net)
    provenance = {
        "config_sha256": _sha256(cfg.source_text),
        "case_sha256": _sha256(case_text),
        "case": cfg.case_path,
        "seed": cfg.seed,
        "package": "evbotnet",
    }
    if cfg.mode == "distribution":
        series, violations, summary = _run_distribution(cfg, net)
        tdict = None
        times = [_hhmm(t, cfg.timestep_minutes) for t in range(cfg.horizon_steps)]
    else:
        series, violations, summary, tdict = _run_transmission(cfg, net)
        times = []
    report = RunReport(
        name=cfg.name, mode=cfg.mode, provenance=provenance,
        timestep_minutes=cfg.timestep_minutes, times=times, series=series,
        violations=violations, cascade=tdict, summary=summary,
    )
    if write:
        write_outputs(report, cfg, output_dir)
    return report


def resolve_output_dir(cfg: ScenarioConfig | None, output_dir=None) -> Path:
    if output_dir is not None:
        return Path(output_dir)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir if cfg else "evbotnet-out")


def write_outputs(report: RunReport, cfg: ScenarioConfig, output_dir=None) -> list[Path]:
    out = resolve_output_dir(cfg, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in cfg.formats:
        p = out / f"{report.name}.report.json"
        p.write_text(report.to_json(), encoding="utf-8")
        written.append(p)
    if "csv" in cfg.formats:
        p = out / f"{report.name}.series.csv"
        p.write_text(_series_csv(report), encoding="utf-8")
        written.append(p)
    return written


# --------------------------------------------------------------------------
# tabular output


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _series_csv(report: RunReport) -> str:
    if report.mode == "transmission":
        return emit_plotdata(report, "fig8")
    cols = sorted(report.series)
    return _csv_text(["time"] + cols,
                     ([t] + [report.series[c][i] for c in cols] for i, t in enumerate(report.times)))


_DIST_TAGS = {
    "fig3": ("feeder_flow_mw_normal", "feeder_flow_mw_attack"),
    "fig4": ("vmin_pu_normal", "vmin_bus_ext_normal", "vmin_pu_attack", "vmin_bus_ext_attack"),
    "fig6": ("feeder_flow_mw_normal", "feeder_flow_mw_attack", "load_mw_normal", "load_mw_attack"),
    "fig7": ("feeder_flow_mw_normal", "feeder_flow_mw_attack", "load_mw_normal", "load_mw_attack"),
}
# report column -> emitted header
_HEADERS = {
    "feeder_flow_mw_normal": "flow_mw_normal",
    "feeder_flow_mw_attack": "flow_mw_attack",
    "vmin_pu_normal": "vmin_pu_normal",
    "vmin_bus_ext_normal": "vmin_bus_normal",
    "vmin_pu_attack": "vmin_pu_attack",
    "vmin_bus_ext_attack": "vmin_bus_attack",
    "load_mw_normal": "load_mw_normal",
    "load_mw_attack": "load_mw_attack",
}
PLOT_TAGS = tuple(sorted(_DIST_TAGS)) + ("fig8",)


def emit_plotdata(report: RunReport, which: str) -> str:
    """Plot-ready CSV text for a figure tag. Values are copied from the report."""
    if which == "fig8":
        header = ["round", "deactivated_branch_from", "deactivated_branch_to",
                  "file_row", "from_bus_canonical", "to_bus_canonical"]
        rounds = (report.cascade or {}).get("rounds", [])
        rows = [
            [r["round"], b["from_bus_ext"], b["to_bus_ext"], b["file_row"],
             b["from_bus"], b["to_bus"]]
            for r in rounds for b in r["deactivated"]
        ]
        return _csv_text(header, rows)
    if which not in _DIST_TAGS:
        raise KeyError(f"unknown figure tag {which!r}; expected one of {list(PLOT_TAGS)}")
    cols = _DIST_TAGS[which]
    if report.times and any(c not in report.series for c in cols):
        raise KeyError(f"report {report.name!r} has no series for {which}")
    return _csv_text(["time"] + [_HEADERS[c] for c in cols],
                     ([t] + [report.series[c][i] for c in cols]
                      for i, t in enumerate(report.times)))
