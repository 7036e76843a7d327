"""
DQN and D3QN against the overlay-only baseline
==============================================

A reduced run (40 episodes, 2 seeds, warmup lowered to one batch) so it
finishes in about a minute. The full protocol is `aoisharing sweep`.
"""

from aoisharing.agents import AgentConfig
from aoisharing.harness import ExperimentConfig, compare_table, format_compare, run_sweep

agent = AgentConfig(episodes=40, warmup=32)
cfg = ExperimentConfig(agent=agent, seeds=(0, 1), sweep="P_pu", values=(0.0, 20.0), eval_episodes=10)
res = run_sweep(cfg)

for r in res.rows:
    print(f"{r.scheme:<9} P_pu {r.value:4.0f} dBm  AoI {r.aoi:6.2f} ± {r.aoi_ci:.2f}  "
          f"rate {r.rate:5.2f}  access {r.access:.2f}")

print()
print(format_compare(compare_table(res.rows)))
