"""
Exact solution of a small discretised model
===========================================

Value iteration gives the optimal Q table; sampled Q-learning should
land on it.
"""

import numpy as np

from aoisharing.env import Action
from aoisharing.oracle import build_mdp, policy_agreement, tabular_q, toy_config, value_iteration

cfg = toy_config()
mdp = build_mdp(cfg, (5, 4), discount=0.5)
vt = value_iteration(mdp, tol=1e-12)
print(mdp.n_states, "states,", len(vt.residuals), "sweeps")

# the optimal plan per (aoi, battery) when the PU is idle / active
names = [a.name.lower() for a in Action]
for pu in (0, 1):
    print("\nPU", "active" if pu else "idle")
    print("aoi " + " ".join(f"b={b:<10d}" for b in range(4)))
    for aoi in range(1, 6):
        row = [names[vt.policy[i]] for i, lab in enumerate(mdp.labels) if lab[0] == aoi and lab[2] == pu]
        print(f"{aoi:>3} " + " ".join(f"{r:<12}" for r in row))

# synchronous Q-learning with a decaying step
qt = tabular_q(mdp, 50_000, beta=1.0, mode="sync", schedule="rescaled_linear", rng=np.random.default_rng(0))
err = np.max(np.abs(qt.q[mdp.valid] - vt.q[mdp.valid]))
print("\nQ-learning sup error %.4f, greedy agreement %.0f%%"
      % (err, 100 * policy_agreement(vt.q, qt.policy, tol=1e-2).mean()))
