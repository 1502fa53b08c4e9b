"""Scenario configuration: one benign task, one attack, one intervention setting."""

from __future__ import annotations

import copy
import json
import zlib
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .attacks import STRATEGIES, EvalConfig, get_task
from .envs import TASK_IDS
from .interventions import combination
from .ppo import PpoConfig

THREAT_MODELS = ("scratch", "post")


def task_defaults(env: str) -> dict:
    """Packaged per-task PPO and evaluation defaults."""
    if env not in TASK_IDS:
        raise ValueError(f"unknown task id {env!r}")
    return json.loads(resources.files("plastidoor").joinpath(f"configs/{env}.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ScenarioConfig:
    scenario_id: str
    env: str = "cartpole"
    task: str | None = None
    threat_model: str = "scratch"
    attack: str | None = None
    attack_params: dict = field(default_factory=dict)
    intervention: str = "none"
    intervention_params: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    suite_seed: int = 0
    budget: float = 0.004
    log_interval: int = 1            # PPO updates between pathology snapshots
    eval_interval: int = 10          # PPO updates between ASR/BTP probes
    sharpness_iterations: int = 20
    sharpness_loss: str = "actor"    # or "combined": actor surrogate plus value loss
    convergence_btp: float = 0.95
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.env not in TASK_IDS:
            raise ValueError(f"{self.scenario_id}: unknown env {self.env!r}")
        if self.threat_model not in THREAT_MODELS:
            raise ValueError(f"{self.scenario_id}: threat model must be one of {THREAT_MODELS}")
        if not self.seeds:
            raise ValueError(f"{self.scenario_id}: need at least one seed")
        if self.attack is not None:
            if self.attack.lower() not in STRATEGIES:
                raise ValueError(f"{self.scenario_id}: unknown attack {self.attack!r}")
            if self.task is None:
                raise ValueError(f"{self.scenario_id}: an attack needs a backdoor task")
        if self.task is not None:
            t = get_task(self.task)
            if t.env != self.env:
                raise ValueError(f"{self.scenario_id}: task {self.task} belongs to {t.env}, not {self.env}")
        combination(self.intervention, self.intervention_params)
        if self.sharpness_loss not in ("actor", "combined"):
            raise ValueError(f"{self.scenario_id}: sharpness_loss must be 'actor' or 'combined'")
        if not 0.0 <= self.budget <= 1.0:
            raise ValueError(f"{self.scenario_id}: poisoning budget must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "scenario_id" not in d:
            raise ValueError("scenario is missing 'scenario_id'")
        env = d.get("env", "cartpole")
        defaults = task_defaults(env)
        ppo = _merge(defaults["ppo"], d.pop("ppo", {}) or {})
        ev = _merge(defaults["eval"], d.pop("eval", {}) or {})
        try:
            return cls(ppo=PpoConfig.from_dict(ppo), eval=EvalConfig(**ev), **d)
        except TypeError as exc:
            raise ValueError(f"{d['scenario_id']}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def seed_sequence(self, seed: int) -> np.random.SeedSequence:
        """Independent stream per (suite seed, scenario id, seed)."""
        return np.random.SeedSequence([self.suite_seed, zlib.crc32(self.scenario_id.encode()), seed])


def parse_scenarios(raw) -> list[ScenarioConfig]:
    """Validate decoded JSON: one scenario, a list, or {"defaults": ..., "scenarios": [...]}.

    All scenarios are validated before any is returned, so a bad entry is
    reported with its id before a single run starts.
    """
    if isinstance(raw, dict) and "scenarios" in raw:
        common = raw.get("defaults", {})
        raw = [_merge(common, s) for s in raw["scenarios"]]
    elif isinstance(raw, dict):
        raw = [raw]
    out, errors = [], []
    for i, rec in enumerate(raw):
        try:
            out.append(ScenarioConfig.from_dict(rec))
        except ValueError as exc:
            errors.append(f"[{rec.get('scenario_id', f'#{i}')}] {exc}")
    if errors:
        raise ValueError("invalid scenarios:\n" + "\n".join(errors))
    return out


def load_scenarios(path) -> list[ScenarioConfig]:
    with open(path) as fh:
        return parse_scenarios(json.load(fh))
