"""Per-bus load time series: base load shapes, EV charging and heat pumps.

Profiles are ``bus x step`` matrices in MW. Time step ``k`` covers
``[k*dt, (k+1)*dt)`` from midnight, so with 15-minute steps 07:00 is step 28.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .grid_model import Network

__all__ = [
    "EvSession",
    "HeatPumpSpec",
    "DemandProfile",
    "ArrivalModel",
    "COMMERCIAL_DAY",
    "RESIDENTIAL_FCDC",
    "RESIDENTIAL_HOME",
    "RESIDENTIAL_SHAPE",
    "COMMERCIAL_SHAPE",
    "step_of",
    "ev_charging_kw",
    "ev_charging_kwh",
    "ev_fleet_profile",
    "hp_electrical_kw",
    "simulate_heat_pump",
    "heat_pump_profile",
    "generate_parking_sessions",
    "generate_heat_pumps",
    "sample_soc",
    "base_profile",
    "outdoor_temperature",
    "compose",
    "read_sessions_csv",
    "write_sessions_csv",
]

SESSION_CSV_FIELDS = ("vehicle_id", "bus", "arrival_step", "departure_step", "soc_init")


def step_of(hhmm: str, timestep_minutes: int = 15) -> int:
    """``"07:00"`` -> step index. The time must fall on a step boundary."""
    h, m = hhmm.split(":")
    minutes = int(h) * 60 + int(m)
    if minutes % timestep_minutes:
        raise ValueError(f"{hhmm} is not aligned to {timestep_minutes}-minute steps")
    return minutes // timestep_minutes


# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class EvSession:
    vehicle_id: str
    bus: int
    arrival: int  # step index
    departure: int  # exclusive step index
    soc_init: float
    battery_kwh: float = 36.0
    max_kw: float = 11.0
    target_soc: float = 1.0
    charge_start: int | None = None  # None: start on arrival
    station: int | None = None

    def __post_init__(self):
        if not self.arrival < self.departure:
            raise ValueError(f"session {self.vehicle_id}: arrival must precede departure")
        if not 0 <= self.soc_init <= self.target_soc <= 1:
            raise ValueError(f"session {self.vehicle_id}: need 0 <= soc_init <= target_soc <= 1")
        if self.max_kw <= 0:
            raise ValueError(f"session {self.vehicle_id}: max_kw must be positive")
        if self.charge_start is not None and not (
            self.arrival <= self.charge_start <= self.departure
        ):
            raise ValueError(f"session {self.vehicle_id}: charge_start outside the stay")

    @property
    def energy_needed_kwh(self) -> float:
        return (self.target_soc - self.soc_init) * self.battery_kwh

    @property
    def start(self) -> int:
        return self.arrival if self.charge_start is None else self.charge_start


@dataclass(frozen=True)
class HeatPumpSpec:
    bus: int
    floor_area: float = 2000.0  # sq.ft
    cop: float = 2.2
    setpoint_low: float = 18.0
    setpoint_high: float = 24.0
    ua_per_sqft: float = 2.5e-4  # kW/degC per sq.ft
    rated_kw: float = 6.0  # electrical
    capacitance_per_sqft: float = 2.0e-3  # kWh/degC per sq.ft
    t_init: float = 21.0
    on_init: bool = False

    def __post_init__(self):
        if not self.setpoint_low < self.setpoint_high:
            raise ValueError("setpoint_low must be below setpoint_high")
        if not self.cop > 1:
            raise ValueError("cop must exceed 1")
        if not self.ua_per_sqft > 0:
            raise ValueError("ua_per_sqft must be positive")

    @property
    def ua_kw_per_c(self) -> float:
        return self.ua_per_sqft * self.floor_area

    @property
    def capacitance_kwh_per_c(self) -> float:
        return self.capacitance_per_sqft * self.floor_area


@dataclass(frozen=True)
class DemandProfile:
    timestep_minutes: int
    p_mw: np.ndarray  # bus x step
    q_mvar: np.ndarray = field(default=None)

    def __post_init__(self):
        p = np.asarray(self.p_mw, dtype=float)
        if p.ndim != 2:
            raise ValueError("p_mw must be a bus x step matrix")
        q = np.zeros_like(p) if self.q_mvar is None else np.asarray(self.q_mvar, dtype=float)
        if q.shape != p.shape:
            raise ValueError("q_mvar must match p_mw in shape")
        object.__setattr__(self, "p_mw", p)
        object.__setattr__(self, "q_mvar", q)

    @property
    def n_bus(self) -> int:
        return self.p_mw.shape[0]

    @property
    def horizon(self) -> int:
        return self.p_mw.shape[1]

    @classmethod
    def zeros(cls, n_bus: int, horizon: int, timestep_minutes: int = 15) -> "DemandProfile":
        return cls(timestep_minutes, np.zeros((n_bus, horizon)), np.zeros((n_bus, horizon)))

    def total_mw(self) -> np.ndarray:
        return self.p_mw.sum(axis=0)


# --------------------------------------------------------------------------
# EV charging


def ev_charging_kwh(session: EvSession, horizon: int, timestep_minutes: int = 15) -> np.ndarray:
    """Energy delivered to one session in each step, kWh.

    The EV charges at ``max_kw`` from ``session.start`` until the target SOC
    is reached or it departs. Step energies are differences of the capped
    cumulative energy ``min(j * max_kw * dt, needed)``; consecutive values are
    within a factor of two of each other, so every difference is exact and
    the steps sum to the needed energy without rounding.
    """
    dt_h = timestep_minutes / 60.0
    kwh = np.zeros(horizon)
    needed = session.energy_needed_kwh
    per_step = session.max_kw * dt_h
    stop = min(session.departure, horizon)
    done = 0.0
    for j, k in enumerate(range(session.start, stop), start=1):
        if done >= needed:
            break
        cum = min(j * per_step, needed)
        kwh[k] = cum - done
        done = cum
    return kwh


def ev_charging_kw(session: EvSession, horizon: int, timestep_minutes: int = 15) -> np.ndarray:
    """Charge-on-arrival schedule of one session, kW per step.

    Full steps draw exactly ``max_kw``; the last step draws only what is
    left, so no energy is delivered past the target.
    """
    dt_h = timestep_minutes / 60.0
    kwh = ev_charging_kwh(session, horizon, timestep_minutes)
    return np.minimum(kwh / dt_h, session.max_kw)


def completion_step(session: EvSession, timestep_minutes: int = 15) -> int:
    """First step at which the session no longer draws power."""
    dt_h = timestep_minutes / 60.0
    steps = math.ceil(session.energy_needed_kwh / (session.max_kw * dt_h) - 1e-12)
    return min(session.start + max(steps, 0), session.departure)


def ev_fleet_profile(
    sessions: Iterable[EvSession],
    n_bus: int,
    horizon: int,
    timestep_minutes: int = 15,
    policy: str = "uncontrolled",
) -> DemandProfile:
    """Aggregate EV sessions into a per-bus profile at unity power factor."""
    if policy != "uncontrolled":
        raise ValueError(f"unknown charging policy {policy!r}")
    p = np.zeros((n_bus, horizon))
    for s in sessions:
        if not 0 <= s.bus < n_bus:
            raise KeyError(f"session {s.vehicle_id} on unknown bus {s.bus}")
        if s.departure > horizon:
            raise ValueError(f"session {s.vehicle_id} departs after the horizon")
        p[s.bus] += ev_charging_kw(s, horizon, timestep_minutes) / 1000.0
    return DemandProfile(timestep_minutes, p)


@dataclass(frozen=True)
class ArrivalModel:
    """Arrival/dwell distribution for one charging lot, in hours.

    Each station hosts at most one session per day, which keeps the lot's
    concurrency at or below its station count.
    """

    arrival_mean_h: float = 8.5
    arrival_sd_h: float = 1.0
    dwell_mean_h: float = 8.0
    dwell_sd_h: float = 1.5
    min_dwell_h: float = 0.5
    occupancy: float = 1.0
    arrival_window_h: tuple[float, float] | None = None  # uniform arrivals when set


# Commuter parking lot: morning arrivals, working-day stays.
COMMERCIAL_DAY = ArrivalModel()
# Fast-charge stops by residents without home charging, spread over the day.
RESIDENTIAL_FCDC = ArrivalModel(
    dwell_mean_h=1.0, dwell_sd_h=0.25, min_dwell_h=0.75, arrival_window_h=(0.0, 23.0)
)
# Home charging after the evening commute.
RESIDENTIAL_HOME = ArrivalModel(arrival_mean_h=18.0, arrival_sd_h=1.5, dwell_mean_h=12.0,
                                dwell_sd_h=1.0)


def sample_soc(rng: np.random.Generator, n: int, low: float = 0.2, high: float = 0.3) -> np.ndarray:
    return rng.uniform(low, high, size=n)


def generate_parking_sessions(
    seed,
    n_stations: int,
    bus: int,
    arrival_model: ArrivalModel = COMMERCIAL_DAY,
    *,
    horizon: int = 96,
    timestep_minutes: int = 15,
    max_kw: float = 50.0,
    battery_kwh: float = 36.0,
    prefix: str = "ev",
) -> list[EvSession]:
    """Synthetic lot sessions standing in for recorded parking data.

    ``seed`` may be an int or a ``numpy.random.Generator``. Sessions are
    clipped to the horizon; ``soc_init`` is uniform on [0.2, 0.3].
    """
    if n_stations < 1:
        raise ValueError("n_stations must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = arrival_model
    per_h = 60 / timestep_minutes
    used = rng.random(n_stations) < m.occupancy
    if m.arrival_window_h is not None:
        arrive_h = rng.uniform(*m.arrival_window_h, size=n_stations)
    else:
        arrive_h = rng.normal(m.arrival_mean_h, m.arrival_sd_h, size=n_stations)
    dwell_h = np.maximum(rng.normal(m.dwell_mean_h, m.dwell_sd_h, size=n_stations), m.min_dwell_h)
    soc = sample_soc(rng, n_stations)
    sessions = []
    for st in range(n_stations):
        if not used[st]:
            continue
        a = int(np.clip(round(arrive_h[st] * per_h), 0, horizon - 1))
        d = int(np.clip(a + max(round(dwell_h[st] * per_h), 1), a + 1, horizon))
        sessions.append(
            EvSession(
                vehicle_id=f"{prefix}{bus}-{st:03d}",
                bus=bus,
                arrival=a,
                departure=d,
                soc_init=float(soc[st]),
                battery_kwh=battery_kwh,
                max_kw=max_kw,
                station=st,
            )
        )
    return sessions


def read_sessions_csv(path, battery_kwh: float = 36.0, max_kw: float = 50.0) -> list[EvSession]:
    """Load sessions from ``vehicle_id,bus,arrival_step,departure_step,soc_init``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(SESSION_CSV_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        return [
            EvSession(
                vehicle_id=row["vehicle_id"],
                bus=int(row["bus"]),
                arrival=int(row["arrival_step"]),
                departure=int(row["departure_step"]),
                soc_init=float(row["soc_init"]),
                battery_kwh=battery_kwh,
                max_kw=max_kw,
            )
            for row in reader
        ]


def write_sessions_csv(path, sessions: Sequence[EvSession]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SESSION_CSV_FIELDS)
        for s in sessions:
            w.writerow([s.vehicle_id, s.bus, s.arrival, s.departure, repr(s.soc_init)])


# --------------------------------------------------------------------------
# heat pumps


def hp_electrical_kw(thermal_kw, cop: float, rated_kw: float = math.inf):
    """Electrical draw for a thermal output, capped at the rated input."""
    return np.minimum(np.asarray(thermal_kw, dtype=float) / cop, rated_kw)


def simulate_heat_pump(spec: HeatPumpSpec, outdoor_c: Sequence[float], timestep_minutes: int = 15):
    """Run one thermostat-controlled house.

    First-order thermal model, integrated exactly over each step with the
    outdoor temperature and heat-pump state held constant. The thermostat
    switches on below ``setpoint_low`` and off above ``setpoint_high``.

    Returns ``(indoor_c, electrical_kw)``; ``indoor_c`` has one more entry
    than ``outdoor_c`` (the initial state).
    """
    dt_h = timestep_minutes / 60.0
    ua = spec.ua_kw_per_c
    decay = math.exp(-ua * dt_h / spec.capacitance_kwh_per_c)
    thermal_on = spec.rated_kw * spec.cop
    temps = np.empty(len(outdoor_c) + 1)
    elec = np.zeros(len(outdoor_c))
    temps[0] = spec.t_init
    on = spec.on_init
    for k, t_out in enumerate(outdoor_c):
        t = temps[k]
        if t < spec.setpoint_low:
            on = True
        elif t > spec.setpoint_high:
            on = False
        q = thermal_on if on else 0.0
        t_eq = t_out + q / ua
        temps[k + 1] = t_eq + (t - t_eq) * decay
        elec[k] = hp_electrical_kw(q, spec.cop, spec.rated_kw)
    return temps, elec


def heat_pump_profile(
    specs: Iterable[HeatPumpSpec],
    outdoor_c: Sequence[float],
    n_bus: int,
    timestep_minutes: int = 15,
) -> DemandProfile:
    """Aggregate heat-pump electrical load per bus (unity power factor)."""
    outdoor_c = np.asarray(outdoor_c, dtype=float)
    p = np.zeros((n_bus, len(outdoor_c)))
    for spec in specs:
        _, kw = simulate_heat_pump(spec, outdoor_c, timestep_minutes)
        p[spec.bus] += kw / 1000.0
    return DemandProfile(timestep_minutes, p)


def generate_heat_pumps(
    seed, buses: Iterable[int], per_bus: int, **overrides
) -> list[HeatPumpSpec]:
    """Random fleet: floor area uniform on 1500-2500 sq.ft, indoor start
    uniform inside the deadband, thermostat initially off."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    template = HeatPumpSpec(bus=0, **overrides)
    specs = []
    for b in buses:
        areas = rng.uniform(1500, 2500, size=per_bus)
        t0 = rng.uniform(template.setpoint_low, template.setpoint_high, size=per_bus)
        specs += [
            replace(template, bus=int(b), floor_area=float(a), t_init=float(t))
            for a, t in zip(areas, t0)
        ]
    return specs


def outdoor_temperature(
    horizon: int, timestep_minutes: int = 15, mean_c: float = -5.0, swing_c: float = 4.0
) -> np.ndarray:
    """Winter day: sinusoid with its minimum at 05:00 and maximum at 17:00."""
    hours = np.arange(horizon) * timestep_minutes / 60.0
    return mean_c - swing_c * np.cos(2 * np.pi * (hours - 5.0) / 24.0)


# --------------------------------------------------------------------------
# base load and composition

# Hourly multipliers of the case-file load, 00:00 .. 23:00.
RESIDENTIAL_SHAPE = np.array([
    0.52, 0.48, 0.46, 0.45, 0.46, 0.52, 0.64, 0.72, 0.70, 0.64, 0.60, 0.60,
    0.60, 0.58, 0.58, 0.62, 0.72, 0.86, 0.96, 1.00, 0.96, 0.86, 0.74, 0.60,
])
COMMERCIAL_SHAPE = np.array([
    0.35, 0.33, 0.32, 0.32, 0.33, 0.38, 0.50, 0.68, 0.86, 0.95, 1.00, 1.00,
    0.98, 1.00, 0.98, 0.94, 0.86, 0.72, 0.58, 0.50, 0.45, 0.42, 0.40, 0.37,
])


def base_profile(
    net: Network,
    horizon: int = 96,
    timestep_minutes: int = 15,
    shape: Sequence[float] | None = RESIDENTIAL_SHAPE,
    bus_shapes: dict | None = None,
    scale: float = 1.0,
) -> DemandProfile:
    """Non-flexible load: case-file P/Q times an hourly shape.

    ``shape=None`` holds the case-file load flat. ``bus_shapes`` overrides
    the shape for individual buses (e.g. a commercial bus).
    """
    hours = (np.arange(horizon) * timestep_minutes // 60) % 24
    flat = np.ones(24)
    default = flat if shape is None else np.asarray(shape, dtype=float)
    mult = np.tile(default[hours], (net.n_bus, 1))
    for b, s in (bus_shapes or {}).items():
        mult[b] = np.asarray(s, dtype=float)[hours]
    mult *= scale
    return DemandProfile(
        timestep_minutes, net.p_load[:, None] * mult, net.q_load[:, None] * mult
    )


def compose(base: DemandProfile, addends: Sequence[DemandProfile] = ()) -> DemandProfile:
    """Elementwise sum of profiles sharing shape and timestep."""
    p, q = base.p_mw.copy(), base.q_mvar.copy()
    for a in addends:
        if a.p_mw.shape != base.p_mw.shape or a.timestep_minutes != base.timestep_minutes:
            raise ValueError(
                f"profile mismatch: {a.p_mw.shape}@{a.timestep_minutes}min vs "
                f"{base.p_mw.shape}@{base.timestep_minutes}min"
            )
        p += a.p_mw
        q += a.q_mvar
    return DemandProfile(base.timestep_minutes, p, q)
