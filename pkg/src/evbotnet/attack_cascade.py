"""Botnet attack scenarios and the overload cascade on a transmission grid."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .demand import EvSession, completion_step
from .grid_model import BranchStatus, BusKind, Network, scale_loads
from .powerflow import (
    ConvergenceError,
    PowerFlowSolution,
    SolveOptions,
    check_limits,
    solve_ac,
)

logger = logging.getLogger(__name__)

__all__ = [
    "AttackKind",
    "Actor",
    "AttackScenario",
    "apply_attack",
    "Island",
    "find_islands",
    "CascadePolicy",
    "CascadeRound",
    "CascadeTrace",
    "cascade",
    "replay",
    "branch_capacities",
    "trace_to_dict",
    "feeder_branch",
    "solve_series",
    "distribution_guard",
]


class AttackKind(enum.Enum):
    SynchronizedFcdcStart = "synchronized_fcdc_start"
    UniformLoadScale = "uniform_load_scale"


class Actor(enum.Enum):
    # descriptive label only, it does not change the physics
    EvBotnet = "ev_botnet"
    ChargingStation = "charging_station"
    Cpo = "cpo"
    Msp = "msp"


@dataclass(frozen=True)
class AttackScenario:
    """What the botnet does.

    ``target_buses`` holds canonical ids; ``None`` means every bus the
    attack can reach (all sessions, or all buses of the network).
    """

    kind: AttackKind
    t_attack: int | None = None
    target_buses: frozenset | None = None
    factor: float = 1.0
    compromised_actor: Actor = Actor.EvBotnet

    def __post_init__(self):
        if self.target_buses is not None:
            object.__setattr__(self, "target_buses", frozenset(int(b) for b in self.target_buses))
        if self.factor < 0:
            raise ValueError("factor must be non-negative")
        if self.kind is AttackKind.SynchronizedFcdcStart:
            if self.t_attack is None or self.t_attack < 0:
                raise ValueError("a synchronized start needs a non-negative t_attack")


def _attack_sessions(
    scenario: AttackScenario,
    sessions: Sequence[EvSession],
    horizon: int,
    timestep_minutes: int,
    n_bus: int | None,
) -> list[EvSession]:
    t = scenario.t_attack
    if not 0 <= t < horizon:
        raise ValueError(f"t_attack {t} outside the horizon of {horizon} steps")
    targets = scenario.target_buses
    if targets is not None and n_bus is not None:
        unknown = sorted(b for b in targets if not 0 <= b < n_bus)
        if unknown:
            raise KeyError(f"unknown target bus id(s): {unknown}")
    out = []
    for s in sessions:
        if targets is not None and s.bus not in targets:
            out.append(s)
            continue
        if s.energy_needed_kwh <= 0 or completion_step(s, timestep_minutes) <= t:
            out.append(s)  # already full
        elif s.start <= t:
            # parked and charging (or held) at the attack time
            out.append(s if s.start == t or s.charge_start is None else replace(s, charge_start=t))
        else:
            # later arrivals are summoned to the charger at t, stay length kept
            dwell = s.departure - s.arrival
            out.append(replace(s, arrival=t, departure=min(t + dwell, horizon), charge_start=None))
    return out


def apply_attack(
    scenario: AttackScenario,
    target,
    *,
    horizon: int | None = None,
    timestep_minutes: int = 15,
    n_bus: int | None = None,
):
    """Apply ``scenario`` to a session list or to a :class:`Network`.

    A synchronized start collapses charging diversity: every session still
    needing energy at ``t_attack`` draws full power from that step on. A load
    scale multiplies P and Q on the target buses.
    """
    if scenario.kind is AttackKind.UniformLoadScale:
        if not isinstance(target, Network):
            raise TypeError("a load-scale attack applies to a Network")
        targets = None if scenario.target_buses is None else sorted(scenario.target_buses)
        return scale_loads(target, scenario.factor, targets)
    if isinstance(target, Network):
        raise TypeError("a synchronized start applies to EV sessions")
    sessions = list(target)
    if horizon is None:
        horizon = max((s.departure for s in sessions), default=0)
    return _attack_sessions(scenario, sessions, horizon, timestep_minutes, n_bus)


# --------------------------------------------------------------------------
# islands


@dataclass(frozen=True)
class Island:
    buses: frozenset
    branches: frozenset
    generators: frozenset  # generator indices
    load_mw: float
    has_generation: bool

    def key(self):
        return (tuple(sorted(self.buses)), tuple(sorted(self.branches)))


def find_islands(net: Network) -> list[Island]:
    """Connected components over in-service branches, ordered by lowest bus id."""
    n = net.n_bus
    on = [k for k, br in enumerate(net.branches) if br.in_service]
    f = [net.branches[k].from_bus for k in on]
    t = [net.branches[k].to_bus for k in on]
    adj = sp.coo_matrix((np.ones(len(on)), (f, t)), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    members = [[] for _ in range(ncomp)]
    for b in range(n):
        members[labels[b]].append(b)
    br_of = [[] for _ in range(ncomp)]
    for k in on:
        br_of[labels[net.branches[k].from_bus]].append(k)
    gen_of = [[] for _ in range(ncomp)]
    for g_idx, g in enumerate(net.generators):
        if g.in_service:
            gen_of[labels[g.bus]].append(g_idx)
    islands = [
        Island(
            buses=frozenset(members[c]),
            branches=frozenset(br_of[c]),
            generators=frozenset(gen_of[c]),
            load_mw=math.fsum(net.buses[b].p_load for b in members[c]),
            has_generation=bool(gen_of[c]),
        )
        for c in range(ncomp)
    ]
    return sorted(islands, key=lambda isl: min(isl.buses))


# --------------------------------------------------------------------------
# cascade


@dataclass(frozen=True)
class CascadePolicy:
    """Knobs of the cascade loop.

    rating_basis
        ``"case"`` compares the larger end MVA against the case-file
        ``rate_mva`` (0 means unlimited). ``"base_flow"`` gives every branch
        a capacity of ``(1 + margin)`` times its MVA flow in the pre-attack
        solve of the reference network.
    dispatch
        ``"slack"``: the island slack absorbs every imbalance.
        ``"islands_proportional"``: an island formed by the cascade first
        re-dispatches its generators in proportion to ``p_max`` so the slack
        only covers losses. ``"proportional"`` does that in every island,
        including the first solve of the intact network.
    on_nonconvergence
        ``"dead"`` drops a non-converging island (its load is lost);
        ``"abort"`` raises :class:`ConvergenceError`.
    strict_capacity
        Shed load proportionally in islands whose load exceeds the summed
        ``p_max`` of their generators; shed MW counts as outage.
    """

    rating_basis: str = "case"
    margin: float = 0.93
    dispatch: str = "slack"
    on_nonconvergence: str = "dead"
    strict_capacity: bool = False

    def __post_init__(self):
        if self.rating_basis not in ("case", "base_flow"):
            raise ValueError(f"unknown rating_basis {self.rating_basis!r}")
        if self.dispatch not in ("slack", "proportional", "islands_proportional"):
            raise ValueError(f"unknown dispatch {self.dispatch!r}")
        if self.on_nonconvergence not in ("dead", "abort"):
            raise ValueError(f"unknown on_nonconvergence {self.on_nonconvergence!r}")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


@dataclass(frozen=True)
class CascadeRound:
    deactivated_branches: tuple  # canonical branch indices, ascending
    loadings: tuple  # flow / capacity for each deactivated branch
    islands: tuple  # Island, as solved in this round
    solved: tuple  # per island: True/False, None when dead (no generation)


@dataclass
class CascadeTrace:
    rounds: list
    final_islands: list
    total_deactivated: frozenset
    outage_mw: float
    served_mw: float
    shed_mw: float
    dead_buses: frozenset
    original_load_mw: float
    capacities: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def round_sizes(self) -> list[int]:
        return [len(r.deactivated_branches) for r in self.rounds]


def _max_end_mva(sol: PowerFlowSolution) -> np.ndarray:
    return np.maximum(sol.s_from, sol.s_to)


def branch_capacities(
    net: Network,
    policy: CascadePolicy,
    opts: SolveOptions | None = None,
    reference: Network | None = None,
) -> np.ndarray:
    """MVA capacity per branch under ``policy``; ``inf`` means unlimited."""
    if policy.rating_basis == "case":
        rate = np.array([br.rate_mva for br in net.branches], dtype=float)
        return np.where(rate > 0, rate, np.inf)
    ref = reference if reference is not None else net
    sol = solve_ac(ref, opts)
    if not sol.converged:
        raise ConvergenceError("reference network for base-flow ratings did not converge")
    return (1.0 + policy.margin) * _max_end_mva(sol)


def _subnetwork(net: Network, island: Island, dispatch: bool):
    """Renumbered copy of one island with exactly one slack.

    Returns ``(subnet, branch_map)`` where ``branch_map[j]`` is the parent
    index of sub-branch ``j``.
    """
    members = sorted(island.buses)
    idx = {b: i for i, b in enumerate(members)}
    buses = [replace(net.buses[b], id=idx[b]) for b in members]
    gens = [replace(net.generators[g], bus=idx[net.generators[g].bus])
            for g in sorted(island.generators)]
    kmap = sorted(island.branches)
    branches = [
        replace(net.branches[k], from_bus=idx[net.branches[k].from_bus],
                to_bus=idx[net.branches[k].to_bus])
        for k in kmap
    ]
    slacks = [b.id for b in buses if b.kind == BusKind.Slack]
    if len(slacks) != 1:
        chosen = max(gens, key=lambda g: (g.p_max, -g.bus)).bus
        buses = [
            replace(b, kind=BusKind.Slack if b.id == chosen
                    else (BusKind.PV if b.kind == BusKind.Slack else b.kind))
            for b in buses
        ]
    if dispatch:
        load = math.fsum(b.p_load for b in buses)
        gen = math.fsum(g.p_out for g in gens)
        w = np.array([g.p_max for g in gens], dtype=float)
        w = w / w.sum() if w.sum() > 0 else np.full(len(gens), 1.0 / len(gens))
        gens = [replace(g, p_out=g.p_out + (load - gen) * wi) for g, wi in zip(gens, w)]
    sub = Network(net.base_mva, buses, branches, gens, name=net.name)
    return sub, kmap


def _shed(net: Network, island: Island) -> tuple[Network, float]:
    cap = math.fsum(net.generators[g].p_max for g in island.generators)
    if island.load_mw <= cap or island.load_mw <= 0:
        return net, 0.0
    keep = cap / island.load_mw
    p, q = net.p_load, net.q_load
    for b in island.buses:
        p[b] *= keep
        q[b] *= keep
    return net.with_loads(p, q), island.load_mw - cap


def cascade(
    net: Network,
    opts: SolveOptions | None = None,
    policy: CascadePolicy | None = None,
    *,
    reference: Network | None = None,
    capacities: Sequence[float] | None = None,
) -> CascadeTrace:
    """Run the overload cascade on ``net`` (already carrying the attack load).

    Each round solves every live island, collects all branches above
    capacity and takes them out together. Islands left without generation
    are dead and their load is lost. A new island gets the generator with
    the largest ``p_max`` as its slack.

    ``reference`` is the pre-attack network; it is checked for base-case
    overloads and supplies base-flow ratings. It defaults to ``net``.
    """
    opts = opts or SolveOptions()
    policy = policy or CascadePolicy()
    ref = reference if reference is not None else net
    warnings = []
    if capacities is None:
        cap = branch_capacities(net, policy, opts, ref)
    else:
        cap = np.asarray(capacities, dtype=float)
    base_sol = solve_ac(ref, opts)
    if not base_sol.converged:
        warnings.append("reference network does not converge")
    elif np.any(_max_end_mva(base_sol) > cap):
        over = np.flatnonzero(_max_end_mva(base_sol) > cap).tolist()
        warnings.append(f"reference network already overloads branches {over}")
    for w in warnings:
        logger.warning(w)

    original = math.fsum(net.p_load)
    cur = net
    dead: set[int] = set()
    shed_total = 0.0
    rounds = []
    first = True
    for _ in range(net.n_branch + 1):
        islands = find_islands(cur)
        if policy.strict_capacity:
            for isl in islands:
                if isl.has_generation and not (isl.buses & dead):
                    cur, shed = _shed(cur, isl)
                    shed_total += shed
            islands = find_islands(cur)
        over: dict[int, float] = {}
        solved = []
        for isl in islands:
            if not isl.has_generation or isl.buses & dead:
                dead |= isl.buses
                solved.append(None)
                continue
            has_slack = any(cur.buses[b].kind == BusKind.Slack for b in isl.buses)
            dispatch = policy.dispatch == "proportional" or (
                policy.dispatch == "islands_proportional" and not has_slack and not first
            )
            sub, kmap = _subnetwork(cur, isl, dispatch)
            sol = solve_ac(sub, opts)
            solved.append(sol.converged)
            if not sol.converged:
                if policy.on_nonconvergence == "abort":
                    raise ConvergenceError(
                        f"island with buses {sorted(cur.external(b) for b in isl.buses)} "
                        "did not converge"
                    )
                dead |= isl.buses
                continue
            flow = _max_end_mva(sol)
            for j, k in enumerate(kmap):
                if flow[j] > cap[k]:
                    over[k] = float(flow[j] / cap[k])
        first = False
        if not over:
            break
        ids = tuple(sorted(over))
        rounds.append(CascadeRound(ids, tuple(over[k] for k in ids), tuple(islands), tuple(solved)))
        cur = cur.with_branch_status(ids, BranchStatus.Deactivated)
    else:  # pragma: no cover - every round removes a branch
        raise RuntimeError("cascade did not terminate")

    dead_load = math.fsum(cur.buses[b].p_load for b in dead)
    served = math.fsum(cur.buses[b].p_load for b in range(cur.n_bus) if b not in dead)
    return CascadeTrace(
        rounds=rounds,
        final_islands=find_islands(cur),
        total_deactivated=frozenset(k for r in rounds for k in r.deactivated_branches),
        outage_mw=dead_load + shed_total,
        served_mw=served,
        shed_mw=shed_total,
        dead_buses=frozenset(dead),
        original_load_mw=original,
        capacities=cap,
        warnings=warnings,
    )


def replay(net: Network, trace: CascadeTrace) -> list[list[Island]]:
    """Island structure before each recorded round, then the final one."""
    out = []
    cur = net
    for r in trace.rounds:
        out.append(find_islands(cur))
        cur = cur.with_branch_status(r.deactivated_branches, BranchStatus.Deactivated)
    out.append(find_islands(cur))
    return out


def _branch_record(net: Network, k: int) -> dict:
    br = net.branches[k]
    return {
        "index": k,
        "file_row": k + 1,
        "from_bus": br.from_bus,
        "to_bus": br.to_bus,
        "from_bus_ext": net.external(br.from_bus),
        "to_bus_ext": net.external(br.to_bus),
    }


def _island_record(net: Network, isl: Island, solved) -> dict:
    return {
        "buses": sorted(isl.buses),
        "buses_ext": sorted(net.external(b) for b in isl.buses),
        "n_branches": len(isl.branches),
        "n_generators": len(isl.generators),
        "load_mw": isl.load_mw,
        "has_generation": isl.has_generation,
        "solved": solved,
    }


def trace_to_dict(net: Network, trace: CascadeTrace) -> dict:
    """JSON-ready view keyed by both canonical and case-file ids."""
    return {
        "rounds": [
            {
                "round": i + 1,
                "deactivated": [
                    dict(_branch_record(net, k), loading=ld)
                    for k, ld in zip(r.deactivated_branches, r.loadings)
                ],
                "islands": [_island_record(net, isl, s) for isl, s in zip(r.islands, r.solved)],
            }
            for i, r in enumerate(trace.rounds)
        ],
        "final_islands": [
            _island_record(net, isl, None if isl.buses & trace.dead_buses else True)
            for isl in trace.final_islands
        ],
        "total_deactivated": len(trace.total_deactivated),
        "dead_buses": sorted(trace.dead_buses),
        "dead_buses_ext": sorted(net.external(b) for b in trace.dead_buses),
        "outage_mw": trace.outage_mw,
        "shed_mw": trace.shed_mw,
        "served_mw": trace.served_mw,
        "original_load_mw": trace.original_load_mw,
        "outage_fraction": trace.outage_mw / trace.original_load_mw
        if trace.original_load_mw else 0.0,
        "warnings": list(trace.warnings),
    }


# --------------------------------------------------------------------------
# distribution side


def feeder_branch(net: Network) -> int:
    """Index of the first in-service branch touching the slack bus."""
    slack = set(net.slack_buses())
    for k, br in enumerate(net.branches):
        if br.in_service and (br.from_bus in slack or br.to_bus in slack):
            return k
    raise ValueError("no branch leaves the slack bus")


def solve_series(
    net: Network,
    p_mw: np.ndarray,
    q_mvar: np.ndarray,
    opts: SolveOptions | None = None,
    *,
    warm_start: bool = True,
) -> list[PowerFlowSolution]:
    """One power flow per column of the bus x step load matrices."""
    p_mw = np.asarray(p_mw, dtype=float)
    q_mvar = np.asarray(q_mvar, dtype=float)
    if p_mw.shape[0] != net.n_bus:
        raise ValueError("load matrix rows must match the bus count")
    sols = []
    prev = None
    for k in range(p_mw.shape[1]):
        sol = solve_ac(net.with_loads(p_mw[:, k], q_mvar[:, k]), opts,
                       init=prev if warm_start else None)
        if not sol.converged and prev is not None:
            sol = solve_ac(net.with_loads(p_mw[:, k], q_mvar[:, k]), opts)
        sols.append(sol)
        prev = sol if sol.converged else None
    return sols


def distribution_guard(
    net33: Network,
    profile,
    feeder_limit_mw: float,
    opts: SolveOptions | None = None,
    feeder: int | None = None,
) -> np.ndarray:
    """True at each step where the head-feeder MW flow stays within the limit.

    Raises :class:`ConvergenceError` if any step fails to solve.
    """
    k = feeder_branch(net33) if feeder is None else feeder
    out = np.ones(profile.horizon, dtype=bool)
    for t, sol in enumerate(solve_series(net33, profile.p_mw, profile.q_mvar, opts)):
        if not sol.converged:
            raise ConvergenceError(f"distribution solve failed at step {t}")
        rep = check_limits(net33, sol, {k: feeder_limit_mw})
        out[t] = k not in rep.overloaded_ids
    return out
