"""Small network builders shared by the test modules."""

from __future__ import annotations

from evbotnet.grid_model import Branch, Bus, BusKind, Generator, Network


def make_network(n, lines, p_mw=None, q_mvar=None, base_mva=10.0, slack=0, gens=()):
    """Network from ``(i, j, r, x)`` tuples; bus ``slack`` carries the reference."""
    p_mw = p_mw if p_mw is not None else [0.0] * n
    q_mvar = q_mvar if q_mvar is not None else [0.0] * n
    gen_buses = {g.bus for g in gens}
    buses = [
        Bus(i, i + 1,
            BusKind.Slack if i == slack else (BusKind.PV if i in gen_buses else BusKind.PQ),
            p_load=float(p_mw[i]), q_load=float(q_mvar[i]), base_kv=12.66)
        for i in range(n)
    ]
    branches = [Branch(i, j, r, x) for i, j, r, x in lines]
    generators = [Generator(slack)] + list(gens)
    return Network(base_mva, buses, branches, generators)


TWO_BUS = """\
function mpc = two_bus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	10	1	1.1	0.9;
	2	1	0	0	0	0	1	1	0	10	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
	1	2	0	0.1	0	0	0	0	0	0	1	-360	360;
];
"""
