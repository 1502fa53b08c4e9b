import pytest

from plastidoor.scenario import ScenarioConfig


def tiny(**kw) -> ScenarioConfig:
    """A CartPole scenario small enough to train in about a second."""
    d = {
        "scenario_id": "tiny", "env": "cartpole", "sharpness_iterations": 3, "eval_interval": 5,
        "ppo": {"total_steps": 2560, "finetune_steps": 1280, "n_epochs": 2},
        "eval": {"episodes": 2, "probes": 10},
    }
    for k, v in kw.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return ScenarioConfig.from_dict(d)


@pytest.fixture
def tiny_scenario():
    return tiny
