"""
Planting a backdoor in a CartPole agent
=======================================

Train a PPO agent from scratch while a TrojDRL adversary poisons a small
share of its transitions, then measure how often the trigger flips the
policy to the target action (ASR) and how well it still balances the pole
(BTP). Runs in a couple of minutes on one core.
"""

import numpy as np

from plastidoor.scenario import ScenarioConfig
from plastidoor.training import train

# One scenario: CartPole, backdoor Task0 (cart position pinned to -4.8 maps to pushing right).
sc = ScenarioConfig.from_dict({
    "scenario_id": "quickstart", "env": "cartpole", "task": "task0", "attack": "trojdrl",
    "ppo": {"total_steps": 60_000},
})
log = train(sc, seed=0)
print(f"status {log.status}: ASR {log.final_asr:.2f}, BTP {log.final_btp:.2f}")

# The step log holds the three pathology characteristics at every logged update.
series = log.series
for name in ("weight_magnitude", "effective_rank_ratio", "sharpness"):
    v = series.values(name)
    print(f"{name:>22}: first {v[0]:9.3f}  last {v[-1]:9.3f}  range {np.ptp(v):9.3f}")

# Same scenario with sharpness-aware minimization in the optimizer.
sam = train(ScenarioConfig.from_dict({**sc.to_dict(), "scenario_id": "quickstart_sam", "intervention": "sam"}), 0)
print(f"with SAM: ASR {sam.final_asr:.2f}, BTP {sam.final_btp:.2f}, "
      f"mean sharpness {sam.series.values('sharpness').mean():.1f} vs {series.values('sharpness').mean():.1f}")
