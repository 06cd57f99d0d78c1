"""
Voltage profile of the 33-bus feeder
====================================

Solve the bundled radial feeder at its case-file loads and list the buses
with the lowest voltage magnitude.
"""

import numpy as np

from evbotnet.grid_model import load_case
from evbotnet.powerflow import solve_ac

net = load_case("case33bw")
sol = solve_ac(net)
print(f"converged in {sol.iterations} iterations, mismatch {sol.max_mismatch:.2e} pu")

# canonical ids are 0-based; the case file counts from 1
order = np.argsort(sol.v_mag)
for b in order[:5]:
    print(f"bus {b:2d} (file id {net.external(b):2d}): {sol.v_mag[b]:.4f} pu")

# head-feeder flow and total losses
print(f"feeder flow {sol.p_from[0]:.3f} MW, losses {sol.losses_mw.sum() * 1000:.1f} kW")
