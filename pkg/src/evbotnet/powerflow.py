"""AC power flow by Newton-Raphson in polar coordinates, plus limit checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.sparse.csgraph import connected_components
import scipy.sparse as sp

from .grid_model import AdmittanceMatrix, BusKind, Network, build_admittance

logger = logging.getLogger(__name__)

__all__ = [
    "SolveOptions",
    "PowerFlowSolution",
    "ViolationReport",
    "StructuralError",
    "ConvergenceError",
    "solve_ac",
    "check_limits",
    "jacobian_check",
    "power_balance_residual",
]


class StructuralError(ValueError):
    """The network cannot be posed as a power-flow problem (e.g. no slack)."""


class ConvergenceError(RuntimeError):
    """Raised by callers that cannot accept a non-converged solve."""


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8  # pu, infinity norm of the P/Q mismatch
    max_iter: int = 30
    flat_start: bool = True
    enforce_q_limits: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray  # radians
    p_from: np.ndarray  # MW, per branch
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    slack_p: float  # MW injected at the slack bus(es)
    slack_q: float
    converged: bool
    iterations: int
    max_mismatch: float  # pu
    p_gen: np.ndarray = field(default=None)  # MW per generator
    q_gen: np.ndarray = field(default=None)  # MVAr per generator
    bus_kind: np.ndarray = field(default=None)  # final kinds after PV->PQ switching

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    @property
    def s_from(self) -> np.ndarray:
        return np.hypot(self.p_from, self.q_from)

    @property
    def s_to(self) -> np.ndarray:
        return np.hypot(self.p_to, self.q_to)

    @property
    def losses_mw(self) -> np.ndarray:
        return self.p_from + self.p_to


@dataclass(frozen=True)
class ViolationReport:
    overloaded_branches: tuple  # of (branch index, loading fraction)
    undervoltage_buses: tuple  # of (bus id, pu)
    overvoltage_buses: tuple
    min_voltage: tuple  # (bus id, pu)

    @property
    def empty(self) -> bool:
        return not (self.overloaded_branches or self.undervoltage_buses or self.overvoltage_buses)

    @property
    def overloaded_ids(self) -> list[int]:
        return [k for k, _ in self.overloaded_branches]


# --------------------------------------------------------------------------
# helpers shared with the Jacobian self-test


def _bus_types(net: Network):
    """Slack, PV and PQ index arrays; PV buses without a live generator become PQ."""
    has_gen = np.zeros(net.n_bus, dtype=bool)
    for g in net.generators:
        if g.in_service:
            has_gen[g.bus] = True
    kinds = np.array([int(b.kind) for b in net.buses], dtype=int)
    kinds[(kinds == BusKind.PV) & ~has_gen] = BusKind.PQ
    return kinds


def _check_slacks(net: Network, kinds: np.ndarray):
    on = [br for br in net.branches if br.in_service]
    n = net.n_bus
    if n == 0:
        raise StructuralError("network has no buses")
    adj = sp.coo_matrix(
        (np.ones(len(on)), ([b.from_bus for b in on], [b.to_bus for b in on])), shape=(n, n)
    )
    ncomp, labels = connected_components(adj, directed=False)
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        nslack = int(np.sum(kinds[members] == BusKind.Slack))
        if nslack != 1:
            ext = [net.external(int(i)) for i in members[:5]]
            raise StructuralError(
                f"component containing buses {ext}{'...' if len(members) > 5 else ''} "
                f"has {nslack} slack buses, expected exactly 1"
            )


def _s_bus(net: Network) -> np.ndarray:
    """Scheduled complex injection in pu (generation minus load)."""
    s = -(net.p_load + 1j * net.q_load)
    for g in net.generators:
        if g.in_service:
            s[g.bus] += g.p_out + 1j * g.q_out
    return s / net.base_mva


def _ds_dv(ybus, v):
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    diag_v = sp.diags(v)
    ds_dvm = diag_v @ np.conj(ybus @ sp.diags(vnorm)) + sp.diags(np.conj(ibus) * vnorm)
    ds_dva = 1j * diag_v @ np.conj(sp.diags(ibus) - ybus @ diag_v)
    return sp.csr_matrix(ds_dvm), sp.csr_matrix(ds_dva)


def _jacobian(ybus, v, pvpq, pq) -> np.ndarray:
    ds_dvm, ds_dva = _ds_dv(ybus, v)
    ds_dvm = ds_dvm.toarray()
    ds_dva = ds_dva.toarray()
    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def _mismatch(ybus, v, sbus, pvpq, pq) -> np.ndarray:
    mis = v * np.conj(ybus @ v) - sbus
    return np.r_[mis[pvpq].real, mis[pq].imag]


def _gen_voltage_targets(net: Network) -> np.ndarray:
    vm = np.array([b.v_setpoint for b in net.buses], dtype=float)
    for g in net.generators:
        if g.in_service:
            vm[g.bus] = g.v_setpoint
    return vm


# --------------------------------------------------------------------------
# solver


def _newton(ybus, sbus, v0, ref, pv, pq, tol, max_iter):
    v = v0.copy()
    va, vm = np.angle(v), np.abs(v)
    pvpq = np.r_[pv, pq].astype(int)
    npvpq, npq = len(pvpq), len(pq)
    f = _mismatch(ybus, v, sbus, pvpq, pq)
    norm = np.max(np.abs(f)) if f.size else 0.0
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        jac = _jacobian(ybus, v, pvpq, pq)
        try:
            dx = -np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            return v, False, it, float(norm)
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:npvpq + npq]
        v = vm * np.exp(1j * va)
        vm, va = np.abs(v), np.angle(v)
        f = _mismatch(ybus, v, sbus, pvpq, pq)
        norm = np.max(np.abs(f))
        if not np.isfinite(norm):
            return v, False, it, float("inf")
    return v, bool(norm <= tol), it, float(norm)


def solve_ac(
    net: Network,
    opts: SolveOptions | None = None,
    init: PowerFlowSolution | None = None,
) -> PowerFlowSolution:
    """Solve the AC power flow of ``net``.

    Every connected component must hold exactly one slack bus. Generator
    buses regulate to their set point; with ``opts.enforce_q_limits`` a PV bus
    whose reactive output leaves ``[q_min, q_max]`` is pinned at the violated
    limit and re-solved as PQ, MATPOWER style.

    Non-convergence is reported through ``converged=False``; the returned
    state is the last iterate. ``init`` warm-starts from a previous solution
    of a network with the same buses.
    """
    opts = opts or SolveOptions()
    kinds = _bus_types(net)
    _check_slacks(net, kinds)
    adm = build_admittance(net)
    ybus = adm.entries
    base = net.base_mva

    vset = _gen_voltage_targets(net)
    if init is not None:
        v0 = init.v_mag * np.exp(1j * init.v_ang)
    elif opts.flat_start:
        v0 = np.ones(net.n_bus, dtype=complex)
    else:
        v0 = np.array([b.v_setpoint for b in net.buses]) * np.exp(
            1j * np.deg2rad([b.v_angle for b in net.buses])
        )
    gen_bus = kinds != BusKind.PQ
    v0[gen_bus] = vset[gen_bus] * np.exp(1j * np.angle(v0[gen_bus]))

    sbus = _s_bus(net)
    # aggregate reactive limits per generator bus (pu)
    q_limits: dict[int, tuple[float, float]] = {}
    for g in net.generators:
        if g.in_service:
            hi, lo = q_limits.get(g.bus, (0.0, 0.0))
            q_limits[g.bus] = (hi + g.q_max / base, lo + g.q_min / base)
    qd = net.q_load / base
    iterations = 0
    # generator Q pinned at a limit, per bus (pu)
    fixed_q = {}
    while True:
        ref = np.flatnonzero(kinds == BusKind.Slack)
        pv = np.flatnonzero(kinds == BusKind.PV)
        pq = np.flatnonzero(kinds == BusKind.PQ)
        s_sched = sbus.copy()
        for b, q in fixed_q.items():
            s_sched[b] = s_sched[b].real + 1j * (q - qd[b])
        v, ok, it, norm = _newton(ybus, s_sched, v0, ref, pv, pq, opts.tol, opts.max_iter)
        iterations += it
        if not ok or not opts.enforce_q_limits:
            break
        s_calc = v * np.conj(ybus @ v)
        qg_bus = s_calc.imag + qd
        # switch every violating bus at once, as MATPOWER does by default
        switched = False
        for b in pv:
            qmax, qmin = q_limits[b]
            if qg_bus[b] - qmax > opts.tol:
                fixed_q[b] = qmax
            elif qmin - qg_bus[b] > opts.tol:
                fixed_q[b] = qmin
            else:
                continue
            kinds[b] = BusKind.PQ
            switched = True
        if not switched:
            break
        v0 = v

    return _package(net, adm, v, kinds, ok, iterations, norm, fixed_q)


def _package(net, adm: AdmittanceMatrix, v, kinds, ok, iterations, norm, fixed_q):
    base = net.base_mva
    f = np.array([br.from_bus for br in net.branches], dtype=int)
    t = np.array([br.to_bus for br in net.branches], dtype=int)
    sf = v[f] * np.conj(adm.yf @ v) * base if net.n_branch else np.zeros(0, complex)
    st = v[t] * np.conj(adm.yt @ v) * base if net.n_branch else np.zeros(0, complex)
    s_calc = v * np.conj(adm.entries @ v) * base
    s_gen_bus = s_calc + net.p_load + 1j * net.q_load

    ngen = len(net.generators)
    p_gen = np.array([g.p_out if g.in_service else 0.0 for g in net.generators], dtype=float)
    q_gen = np.zeros(ngen)
    by_bus: dict[int, list[int]] = {}
    for k, g in enumerate(net.generators):
        if g.in_service:
            by_bus.setdefault(g.bus, []).append(k)
    ref = np.flatnonzero(kinds == BusKind.Slack)
    for b, ks in by_bus.items():
        q_total = s_gen_bus[b].imag
        if len(ks) == 1:
            q_gen[ks[0]] = q_total
        else:
            span = np.array([net.generators[k].q_max - net.generators[k].q_min for k in ks])
            share = span / span.sum() if span.sum() > 0 else np.full(len(ks), 1 / len(ks))
            q_gen[ks] = q_total * share
        if b in ref:
            p_other = sum(p_gen[k] for k in ks[1:])
            p_gen[ks[0]] = s_gen_bus[b].real - p_other
    slack_s = s_gen_bus[ref].sum() if len(ref) else 0j
    return PowerFlowSolution(
        v_mag=np.abs(v),
        v_ang=np.angle(v),
        p_from=sf.real,
        q_from=sf.imag,
        p_to=st.real,
        q_to=st.imag,
        slack_p=float(slack_s.real),
        slack_q=float(slack_s.imag),
        converged=ok,
        iterations=iterations,
        max_mismatch=norm,
        p_gen=p_gen,
        q_gen=q_gen,
        bus_kind=kinds,
    )


def power_balance_residual(net: Network, sol: PowerFlowSolution) -> float:
    """Generation minus load, branch losses and shunt consumption, in MW."""
    gen = float(np.sum(sol.p_gen))
    load = net.total_load()
    losses = float(np.sum(sol.losses_mw))
    g_shunt = np.array([b.g_shunt for b in net.buses])
    shunt = float(np.sum(g_shunt * sol.v_mag**2))
    return gen - load - losses - shunt


# --------------------------------------------------------------------------
# limits


def check_limits(
    net: Network,
    sol: PowerFlowSolution,
    extra_mw_limits: Mapping[int, float] | None = None,
    v_bounds: tuple[float, float] | None = None,
) -> ViolationReport:
    """Flag thermal and voltage violations, all with strict inequality.

    A branch is overloaded when its larger end MVA exceeds ``rate_mva``
    (ignored when the rating is 0) or when its larger end ``|P|`` exceeds the
    MW limit given for it in ``extra_mw_limits``. ``v_bounds`` replaces the
    per-bus ``[v_min, v_max]`` band when given.
    """
    extra = dict(extra_mw_limits or {})
    s_max = np.maximum(sol.s_from, sol.s_to)
    p_max = np.maximum(np.abs(sol.p_from), np.abs(sol.p_to))
    over = []
    for k, br in enumerate(net.branches):
        if not br.in_service:
            continue
        loading = 0.0
        if br.rate_mva > 0 and s_max[k] > br.rate_mva:
            loading = s_max[k] / br.rate_mva
        if k in extra and p_max[k] > extra[k]:
            loading = max(loading, p_max[k] / extra[k])
        if loading > 0:
            over.append((k, float(loading)))
    under, high = [], []
    for b in net.buses:
        lo, hi = v_bounds if v_bounds else (b.v_min, b.v_max)
        vm = float(sol.v_mag[b.id])
        if vm < lo:
            under.append((b.id, vm))
        elif vm > hi:
            high.append((b.id, vm))
    i = int(np.argmin(sol.v_mag))
    return ViolationReport(
        overloaded_branches=tuple(over),
        undervoltage_buses=tuple(under),
        overvoltage_buses=tuple(high),
        min_voltage=(i, float(sol.v_mag[i])),
    )


# --------------------------------------------------------------------------
# self-test


def jacobian_check(net: Network, point: np.ndarray, step: float = 1e-6) -> float:
    """Compare the analytic Jacobian with central finite differences.

    ``point`` is the polar state ``[v_ang (rad) per bus, v_mag per bus]``.
    Returns ``max |J - J_fd| / max |J|`` over the reduced (PV/PQ) Jacobian.
    """
    kinds = _bus_types(net)
    n = net.n_bus
    point = np.asarray(point, dtype=float)
    va, vm = point[:n].copy(), point[n:].copy()
    ybus = build_admittance(net).entries
    sbus = _s_bus(net)
    pv = np.flatnonzero(kinds == BusKind.PV)
    pq = np.flatnonzero(kinds == BusKind.PQ)
    pvpq = np.r_[pv, pq].astype(int)

    def f(va_, vm_):
        return _mismatch(ybus, vm_ * np.exp(1j * va_), sbus, pvpq, pq)

    jac = _jacobian(ybus, vm * np.exp(1j * va), pvpq, pq)
    if jac.size == 0:
        return 0.0
    fd = np.empty_like(jac)
    cols = [("a", i) for i in pvpq] + [("m", i) for i in pq]
    for c, (which, i) in enumerate(cols):
        a_hi, a_lo, m_hi, m_lo = va.copy(), va.copy(), vm.copy(), vm.copy()
        if which == "a":
            a_hi[i] += step
            a_lo[i] -= step
        else:
            m_hi[i] += step
            m_lo[i] -= step
        fd[:, c] = (f(a_hi, m_hi) - f(a_lo, m_lo)) / (2 * step)
    scale = np.max(np.abs(jac))
    return float(np.max(np.abs(jac - fd)) / scale) if scale > 0 else float(np.max(np.abs(fd)))
