"""
Flagging sharpness spikes
=========================

A rolling median/MAD z-score over the sharpness trace marks updates whose
curvature jumps far above the recent baseline. The first part uses a
synthetic trace, the second a short poisoned training run.
"""

import numpy as np

from plastidoor.diagnosis import detect_sharpness_anomaly
from plastidoor.scenario import ScenarioConfig
from plastidoor.training import train

rng = np.random.default_rng(0)
trace = 50 + rng.normal(0, 2, 200)
trace[[60, 140]] += 80
rep = detect_sharpness_anomaly(trace, window=11, z_threshold=6.0)
print(f"synthetic: {len(rep)} flags at {list(rep.steps)}")

log = train(ScenarioConfig.from_dict({
    "scenario_id": "scan", "env": "cartpole", "task": "task0", "attack": "trojdrl", "log_interval": 1,
    "ppo": {"total_steps": 30_000},
}), seed=1)
rep = detect_sharpness_anomaly(log.series)
print(f"training run: {len(rep)} of {len(log.series)} updates flagged, steps {list(rep.steps)}")
