import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evbotnet.grid_model import BusKind, Network, build_admittance, parse_case
from evbotnet.powerflow import (
    SolveOptions,
    StructuralError,
    check_limits,
    jacobian_check,
    power_balance_residual,
    solve_ac,
)

from helpers import TWO_BUS, make_network
from oracles import gauss_seidel, line_ybus, pi_ybus, random_radial


def _oracle_inputs(net: Network):
    """Independent Ybus, injections and PV set read straight off the records."""
    branches = [
        (br.from_bus, br.to_bus, br.r, br.x, br.b_charging, br.tap, br.shift)
        for br in net.branches if br.in_service
    ]
    shunts = np.array([(b.g_shunt + 1j * b.b_shunt) / net.base_mva for b in net.buses])
    y = pi_ybus(net.n_bus, branches, shunts)
    s = -(net.p_load + 1j * net.q_load)
    pv = {}
    v_slack = 1.0
    slack = net.slack_buses()[0]
    for g in net.generators:
        s[g.bus] += g.p_out + 1j * g.q_out
        if net.buses[g.bus].kind == BusKind.PV:
            pv[g.bus] = g.v_setpoint
        if g.bus == slack:
            v_slack = g.v_setpoint
    return y, s / net.base_mva, slack, v_slack, pv


# ---------------------------------------------------------------- basic solves


def test_two_bus_no_load_is_flat():
    sol = solve_ac(parse_case(TWO_BUS))
    assert sol.converged and sol.iterations <= 1
    assert np.allclose(sol.v_mag, 1.0) and np.allclose(sol.v_ang, 0.0)
    assert np.allclose([sol.p_from, sol.q_from, sol.p_to, sol.q_to], 0.0)


def test_33_bus_weakest_buses(net33):
    sol = solve_ac(net33)
    assert sol.converged
    assert list(np.argsort(sol.v_mag)[:2]) == [17, 16]


def test_39_bus_converges_with_and_without_q_limits(net39):
    for q in (True, False):
        sol = solve_ac(net39, SolveOptions(enforce_q_limits=q))
        assert sol.converged and sol.max_mismatch <= 1e-8


def test_q_limits_respected(net39):
    sol = solve_ac(net39)
    for k, g in enumerate(net39.generators):
        if net39.buses[g.bus].kind == BusKind.PV:
            assert g.q_min - 1e-6 <= sol.q_gen[k] <= g.q_max + 1e-6


def test_missing_slack_in_island_is_structural():
    net = make_network(4, [(0, 1, 0.01, 0.02), (2, 3, 0.01, 0.02)])
    with pytest.raises(StructuralError):
        solve_ac(net)


def test_bit_identical_repeat(net39):
    a, b = solve_ac(net39), solve_ac(net39)
    for field in ("v_mag", "v_ang", "p_from", "q_from", "p_to", "q_to"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_non_convergence_is_a_result(net33):
    heavy = net33.with_loads(net33.p_load * 20, net33.q_load * 20)
    sol = solve_ac(heavy)
    assert not sol.converged
    assert sol.max_mismatch > 1e-8


# ---------------------------------------------------------------- Gauss-Seidel oracle


@settings(max_examples=10, deadline=None, derandomize=True)
@given(st.integers(0, 2**32 - 1))
def test_random_radial_matches_gauss_seidel(seed):
    rng = np.random.default_rng(seed)
    lines, p, q = random_radial(rng, 8)
    base = 10.0
    v_ref = gauss_seidel(line_ybus(8, lines), -(p + 1j * q), slack=0)
    net = make_network(8, lines, p * base, q * base, base_mva=base)
    sol = solve_ac(net, SolveOptions(tol=1e-12))
    assert sol.converged
    assert np.max(np.abs(sol.v_mag - np.abs(v_ref))) <= 1e-6
    assert np.max(np.abs(sol.v_ang - np.angle(v_ref))) <= 1e-6


@pytest.mark.parametrize("name", ["case33bw", "case39"])
def test_fixture_matches_gauss_seidel(name):
    from evbotnet.grid_model import load_case

    net = load_case(name)
    y, s, slack, v_slack, pv = _oracle_inputs(net)
    v_ref = gauss_seidel(y, s, slack, v_slack, pv, tol=1e-12)
    sol = solve_ac(net, SolveOptions(tol=1e-12, enforce_q_limits=False))
    assert np.max(np.abs(sol.v_mag - np.abs(v_ref))) <= 1e-6


def test_oracle_ybus_agrees(net39):
    y, *_ = _oracle_inputs(net39)
    assert np.allclose(build_admittance(net39).toarray(), y, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- balance and losses


@pytest.mark.parametrize("q_limits", [True, False])
def test_power_balance(net33, net39, q_limits):
    opts = SolveOptions(enforce_q_limits=q_limits)
    for net in (net33, net39):
        sol = solve_ac(net, opts)
        assert abs(power_balance_residual(net, sol)) <= 10 * opts.tol * net.base_mva


def test_losses_non_negative(net33, net39):
    for net in (net33, net39):
        sol = solve_ac(net)
        assert np.all(sol.losses_mw >= -1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_balance_and_losses(seed):
    rng = np.random.default_rng(seed)
    lines, p, q = random_radial(rng, 8)
    net = make_network(8, lines, p * 10, q * 10)
    opts = SolveOptions()
    sol = solve_ac(net, opts)
    assert sol.converged
    assert abs(power_balance_residual(net, sol)) <= 10 * opts.tol * net.base_mva
    assert np.all(sol.losses_mw >= -1e-12)


# ---------------------------------------------------------------- limits


def test_flows_exactly_at_limits_are_not_violations(net33):
    sol = solve_ac(net33)
    s_max = np.maximum(sol.s_from, sol.s_to)
    from dataclasses import replace

    rated = replace(net33, branches=tuple(
        replace(br, rate_mva=float(s)) for br, s in zip(net33.branches, s_max)
    ))
    p_max = np.maximum(np.abs(sol.p_from), np.abs(sol.p_to))
    rep = check_limits(rated, sol, {k: float(p) for k, p in enumerate(p_max)},
                       v_bounds=(float(sol.v_mag.min()), float(sol.v_mag.max())))
    assert rep.empty


def test_feeder_limit_flags_head_branch(net33):
    heavy = net33.with_loads(net33.p_load * 2.2, net33.q_load * 2.2)
    sol = solve_ac(heavy)
    assert sol.converged and sol.p_from[0] > 7.91
    rep = check_limits(heavy, sol, {0: 7.91})
    assert 0 in rep.overloaded_ids
    assert all(loading > 1 for _, loading in rep.overloaded_branches)


def test_interior_voltages_give_no_entries():
    net = parse_case(TWO_BUS)
    sol = solve_ac(net)
    rep = check_limits(net, sol, v_bounds=(0.95, 1.05))
    assert rep.empty and rep.min_voltage[1] == pytest.approx(1.0)


def test_violations_strictly_exceed(net33):
    sol = solve_ac(net33)
    rep = check_limits(net33, sol, v_bounds=(0.95, 1.05))
    assert rep.undervoltage_buses
    assert all(v < 0.95 for _, v in rep.undervoltage_buses)
    assert rep.min_voltage[0] == 17
    assert check_limits(net33, sol, v_bounds=(0.95, 1.05)) == rep


# ---------------------------------------------------------------- Jacobian


def test_jacobian_two_bus_flat():
    net = parse_case(TWO_BUS)
    assert jacobian_check(net, np.r_[np.zeros(2), np.ones(2)]) <= 1e-6


@pytest.mark.parametrize("name", ["case33bw", "case39"])
def test_jacobian_at_solution(name):
    from evbotnet.grid_model import load_case

    net = load_case(name)
    sol = solve_ac(net, SolveOptions(enforce_q_limits=False))
    assert jacobian_check(net, np.r_[sol.v_ang, sol.v_mag]) <= 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_jacobian_random_states(seed):
    from evbotnet.grid_model import load_case

    net = load_case("case39")
    rng = np.random.default_rng(seed)
    point = np.r_[rng.uniform(-0.5, 0.5, net.n_bus), rng.uniform(0.9, 1.1, net.n_bus)]
    assert jacobian_check(net, point) <= 1e-5


def test_no_load_angle_jacobian_signs():
    # at V = 1 and zero angles dP_i/dtheta_k = -B_ik, negative for line neighbours
    from evbotnet.powerflow import _jacobian

    lines = [(0, 1, 0.0, 0.1), (1, 2, 0.0, 0.2), (1, 3, 0.0, 0.05)]
    net = make_network(4, lines)
    y = build_admittance(net).entries
    pvpq = np.arange(1, 4)
    jac = _jacobian(y, np.ones(4, dtype=complex), pvpq, pvpq)
    j11 = jac[:3, :3]
    b = line_ybus(4, lines).imag[1:, 1:]
    assert np.allclose(j11, -b)
    assert j11[0, 1] < 0 and j11[0, 2] < 0 and j11[1, 2] == 0
