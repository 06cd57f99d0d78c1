"""
Synchronized fast-charge start on the 33-bus feeder
===================================================

Run the bundled morning attack scenario and print the head-feeder flow and
the lowest voltage around the attack step, with and without the attack.
"""

from evbotnet.scenario import emit_plotdata, load_config, run_scenario

report = run_scenario(load_config("fig3_attack"), write=False)
t = report.summary["attack_step"]
flow_n = report.series["feeder_flow_mw_normal"]
flow_a = report.series["feeder_flow_mw_attack"]
v_a = report.series["vmin_pu_attack"]

print(f"feeder limit {report.summary['feeder_limit_mw']} MW")
print("time   normal  attack  vmin(attack)")
for k in range(t - 2, t + 4):
    print(f"{report.times[k]}  {flow_n[k]:6.3f}  {flow_a[k]:6.3f}  {v_a[k]:.4f}")

# steps where protection on the head feeder would act
print("over the limit:", report.summary["steps_over_feeder_limit_attack"])

# the same numbers as a plot-ready table
print(emit_plotdata(report, "fig3").splitlines()[t + 1])
