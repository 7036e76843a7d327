"""
One episode of the spectrum-sharing simulator
=============================================

Step the environment by hand, then compare the fixed policies over a
full 300-slot episode.
"""

import numpy as np

from aoisharing.agents import BaselinePolicy, FixedPolicy, RandomPolicy, run_episode
from aoisharing.env import Action, EnvConfig, SpectrumEnv, allocate_power, protection_radius

cfg = EnvConfig()
env = SpectrumEnv(cfg, seed=1)
state = env.reset()
print("SU at", env.geom.su_pos, "distance %.1f m" % env.geom.distance)
print("protection radius %.1f m" % protection_radius(env.geom, cfg.sensing))
print("underlay grant:", allocate_power(env.geom, cfg.sensing), "dBm")

# a few hand-picked actions; the mask says what the battery can pay for
for x in [Action.OVERLAY, Action.UNDERLAY, Action.SILENT, Action.NO_SENSE, Action.UNDERLAY]:
    mask = env.mask()
    if not mask[x]:
        x = Action.NO_SENSE
    out = env.step(x)
    print(f"{x.name:<15} -> case {out.case_id}  aoi {out.next_state.aoi:3d}  "
          f"battery {out.next_state.battery:5.2f}  reward {out.reward:7.2f}")

# %% whole episodes under the fixed policies
for policy in [BaselinePolicy(), RandomPolicy(0), FixedPolicy(Action.UNDERLAY)]:
    rec = run_episode(policy, SpectrumEnv(cfg, seed=2), horizon=300)
    cases = np.bincount(rec.case, minlength=9)[1:]
    print(f"{policy.name:<10} mean AoI {rec.aoi.mean():6.2f}  mean rate {rec.rate.mean():5.2f}  cases 1-8 {cases}")
