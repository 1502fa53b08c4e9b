"""Backdoor tasks, transition poisoning and the ASR / BTP evaluators.

The four strategies are reconstructions of the reward schemes of TrojDRL,
BadRL, SleeperNets and UNIDOOR at the level of detail needed here, not
line-for-line ports of the original attack code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from .envs import ActionSpec, make_env
from .neuralcore import PolicyNet, forward
from .policy import actions_match, greedy_action, log_prob, sample

STRATEGIES = ("trojdrl", "badrl", "sleepernets", "unidoor")

DEFAULT_BUDGET = 0.004

# B_l from the random-policy scores; B_u is the task ceiling / strong-agent score
BTP_BOUNDS = {
    "cartpole": (18.32, 500.0),
    "mountaincar": (-200.0, -110.0),
    "pendulum": (-1410.43, -138.42),
}


@dataclass(frozen=True)
class BackdoorUnit:
    state_dim: int
    trigger_value: float
    target_action: object        # int for discrete tasks, tuple of floats for continuous
    label: str = ""

    def validate(self, obs_dim: int, spec: ActionSpec) -> None:
        if not 0 <= self.state_dim < obs_dim:
            raise ValueError(f"trigger dimension {self.state_dim} outside state of width {obs_dim}")
        if spec.discrete:
            if not (isinstance(self.target_action, (int, np.integer)) and 0 <= self.target_action < spec.n):
                raise ValueError(f"target action {self.target_action!r} invalid for {spec}")
        else:
            a = np.asarray(self.target_action, dtype=float)
            if a.shape != (spec.dims,) or np.any(a < spec.low) or np.any(a > spec.high):
                raise ValueError(f"target action {self.target_action!r} outside {spec}")


@dataclass(frozen=True)
class BackdoorTask:
    task_id: str
    env: str
    units: tuple[BackdoorUnit, ...]

    def __post_init__(self):
        if not self.units:
            raise ValueError("a backdoor task needs at least one unit")
        # the task table reuses a dimension with different trigger values (task23),
        # so uniqueness is over (dimension, value) pairs
        keys = [(u.state_dim, u.trigger_value) for u in self.units]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate trigger in {self.task_id}")
        env = make_env(self.env)
        for u in self.units:
            u.validate(env.obs_dim, env.action_spec)

    @property
    def single(self) -> bool:
        return len(self.units) == 1


def load_backdoor_tasks(path=None, label_overrides: dict | None = None) -> dict[str, BackdoorTask]:
    """Read the declarative task file (defaults to the packaged copy)."""
    if path is None:
        text = resources.files("plastidoor").joinpath("data/backdoor_tasks.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    labels = {env: dict(table) for env, table in raw["action_labels"].items()}
    for env, table in (label_overrides or {}).items():
        labels.setdefault(env, {}).update(table)
    tasks = {}
    for tid, rec in raw["tasks"].items():
        env = rec["env"]
        units = []
        for u in rec["units"]:
            action = labels[env][u["action"]]
            action = tuple(float(x) for x in action) if isinstance(action, list) else int(action)
            units.append(BackdoorUnit(int(u["dim"]), float(u["value"]), action, u["action"]))
        tasks[tid] = BackdoorTask(tid, env, tuple(units))
    return tasks


def get_task(task_id: str) -> BackdoorTask:
    tasks = load_backdoor_tasks()
    try:
        return tasks[task_id]
    except KeyError:
        raise ValueError(f"unknown backdoor task {task_id!r}") from None


def apply_trigger(state: np.ndarray, unit: BackdoorUnit) -> np.ndarray:
    out = np.array(state, dtype=float, copy=True)
    out[..., unit.state_dim] = unit.trigger_value
    return out


@dataclass
class UnidoorController:
    magnitude: float = 1.0
    floor: float = 1.0
    target_asr: float = 0.9
    adjust: float = 0.5
    cap: float = 10.0


def unidoor_adapt(ctrl: UnidoorController, measured_asr: float) -> UnidoorController:
    if not 0.0 <= measured_asr <= 1.0:
        raise ValueError("ASR must lie in [0, 1]")
    if measured_asr < ctrl.target_asr:
        ctrl.magnitude = min(ctrl.cap, ctrl.magnitude * (1.0 + ctrl.adjust))
    else:
        ctrl.magnitude = max(ctrl.floor, ctrl.magnitude / (1.0 + ctrl.adjust))
    return ctrl


@dataclass
class AttackStrategy:
    kind: str = "trojdrl"
    reward_magnitude: float = 1.0        # R_p for TrojDRL / BadRL, floor for UNIDOOR
    sleeper_constant: float = 5.0
    sleeper_weight: float = 0.5
    action_tamper_prob: float = 0.5
    controller: UnidoorController | None = None

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown attack strategy {self.kind!r}")
        if self.reward_magnitude <= 0:
            raise ValueError("reward magnitude must be positive")
        if not 0.0 <= self.action_tamper_prob <= 1.0:
            raise ValueError("action tamper probability must lie in [0, 1]")
        if self.kind == "unidoor" and self.controller is None:
            self.controller = UnidoorController(magnitude=self.reward_magnitude, floor=self.reward_magnitude)


def backdoor_reward(strategy: AttackStrategy, original_reward: float, matched: bool) -> float:
    if not math.isfinite(original_reward):
        raise ValueError("original reward must be finite")
    if strategy.kind in ("trojdrl", "badrl"):
        return strategy.reward_magnitude if matched else -strategy.reward_magnitude
    if strategy.kind == "sleepernets":
        w = strategy.sleeper_weight
        return (1.0 - w) * original_reward + w * strategy.sleeper_constant * float(matched)
    m = strategy.controller.magnitude
    return m if matched else -m


def select_targets(n: int, k: int, strategy: AttackStrategy, values: np.ndarray | None,
                   rng: np.random.Generator) -> np.ndarray:
    if k <= 0 or n == 0:
        return np.zeros(0, dtype=int)
    k = min(k, n)
    if strategy.kind == "badrl":
        if values is None:
            raise ValueError("BadRL selection needs critic values")
        order = np.argsort(-np.abs(np.asarray(values, dtype=float)), kind="stable")
        return np.sort(order[:k])
    return np.sort(rng.choice(n, size=k, replace=False))


def poison_budget(n: int, budget: float) -> int:
    return int(math.floor(budget * n + 1e-9))


def poison_rollout(buffer, task: BackdoorTask, strategy: AttackStrategy, budget: float,
                   actor: PolicyNet, critic: PolicyNet, rng: np.random.Generator,
                   spec: ActionSpec, unit_cursor: int = 0) -> int:
    """Tamper at most floor(budget * len(buffer)) transitions in place.

    Each chosen transition gets the trigger written into its state, an
    action that is the target (with probability ``action_tamper_prob``) or
    a fresh sample from the current policy at the triggered state, the
    log-prob of that action under the current policy, and the backdoor
    reward. Poisoned transitions are scored as one-step episodes, so the
    benign advantage chain around them is left intact.
    """
    n = len(buffer)
    k = poison_budget(n, budget)
    if k == 0:
        return 0
    states = buffer.flat("states")
    idx = select_targets(n, k, strategy, buffer.flat("values"), rng)
    units = [task.units[(unit_cursor + j) % len(task.units)] for j in range(len(idx))]
    trig = np.stack([apply_trigger(states[i], u) for i, u in zip(idx, units)])
    out = forward(actor, trig).post[-1]
    sampled = sample(actor, out, rng)
    tamper = rng.random(len(idx)) < strategy.action_tamper_prob
    actions = []
    for j, u in enumerate(units):
        if tamper[j]:
            actions.append(u.target_action if spec.discrete else np.asarray(u.target_action, dtype=float))
        else:
            actions.append(sampled[j])
    actions = np.array(actions, dtype=int if spec.discrete else float)
    lp = log_prob(actor, out, actions)
    vals = forward(critic, trig).post[-1][:, 0]
    rewards = buffer.flat("rewards")
    for j, (i, u) in enumerate(zip(idx, units)):
        a = actions[j]
        matched = bool(actions_match(np.array([a]), u.target_action, spec, 1e-6)[0])
        r = backdoor_reward(strategy, float(rewards[i]), matched)
        buffer.set_poisoned(int(i), trig[j], a, float(lp[j]), r, float(vals[j]))
    return len(idx)


@dataclass
class Poisoner:
    """Stateful hook handed to rollout collection; cycles units across calls."""

    task: BackdoorTask
    strategy: AttackStrategy
    budget: float
    rng: np.random.Generator
    cursor: int = 0

    def __call__(self, buffer, actor: PolicyNet, critic: PolicyNet, spec: ActionSpec) -> int:
        count = poison_rollout(buffer, self.task, self.strategy, self.budget, actor, critic,
                               self.rng, spec, self.cursor)
        self.cursor = (self.cursor + count) % len(self.task.units)
        return count


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalConfig:
    tolerance: float = 0.05
    episodes: int = 10
    probes: int = 100
    probe_every: int = 10
    btp_low: float | None = None
    btp_high: float | None = None
    parallel: int = 10

    def bounds(self, env_id: str) -> tuple[float, float]:
        lo, hi = BTP_BOUNDS.get(env_id, (None, None))
        lo = self.btp_low if self.btp_low is not None else lo
        hi = self.btp_high if self.btp_high is not None else hi
        if lo is None or hi is None:
            raise ValueError(f"no BTP bounds configured for {env_id!r}")
        if not hi > lo:
            raise ValueError("BTP upper bound must exceed lower bound")
        return lo, hi


def evaluate_returns(actor: PolicyNet, env_id: str, episodes: int, rng: np.random.Generator,
                     parallel: int = 10) -> np.ndarray:
    """Greedy episode returns, run a few episodes at a time in lock step."""
    returns = []
    while len(returns) < episodes:
        m = min(parallel, episodes - len(returns))
        envs = [make_env(env_id) for _ in range(m)]
        spec = envs[0].action_spec
        obs = np.stack([e.reset(int(rng.integers(0, 2 ** 63))) for e in envs])
        totals = np.zeros(m)
        live = np.ones(m, dtype=bool)
        while live.any():
            ids = np.flatnonzero(live)
            acts = greedy_action(actor, obs[ids], spec)
            for j, i in enumerate(ids):
                res = envs[i].step(acts[j])
                totals[i] += res.reward
                obs[i] = res.state
                if res.terminated or res.truncated:
                    live[i] = False
        returns.extend(totals.tolist())
    return np.array(returns)


def btp_from_returns(returns: Sequence[float], low: float, high: float) -> float:
    if not high > low:
        raise ValueError("BTP upper bound must exceed lower bound")
    mean = float(np.mean((np.asarray(returns, dtype=float) - low) / (high - low)))
    return float(np.clip(mean, 0.0, 1.0))


def evaluate_btp(actor: PolicyNet, env_id: str, cfg: EvalConfig, rng: np.random.Generator) -> float:
    lo, hi = cfg.bounds(env_id)
    return btp_from_returns(evaluate_returns(actor, env_id, cfg.episodes, rng, cfg.parallel), lo, hi)


def evaluate_asr(actor: PolicyNet, env_id: str, task: BackdoorTask, cfg: EvalConfig,
                 rng: np.random.Generator) -> float:
    """Fraction of trigger probes answered with the target action.

    Dedicated episodes run on clean states; every ``probe_every`` steps the
    next unit's trigger is written into a copy of the observed state and the
    greedy action is checked. Units are probed in turn, so each gets an equal
    share and the result is their equal-weight average.
    """
    if cfg.probes < 1:
        raise ValueError("need at least one probe")
    if task.env != env_id:
        raise ValueError(f"task {task.task_id} belongs to {task.env}, not {env_id}")
    m = min(cfg.parallel, cfg.probes)
    envs = [make_env(env_id) for _ in range(m)]
    spec = envs[0].action_spec
    obs = np.stack([e.reset(int(rng.integers(0, 2 ** 63))) for e in envs])
    hits = np.zeros(len(task.units))
    counts = np.zeros(len(task.units))
    done_probes = 0
    t = 0
    while done_probes < cfg.probes:
        if t % cfg.probe_every == 0:
            take = min(m, cfg.probes - done_probes)
            for j in range(take):
                ui = (done_probes + j) % len(task.units)
                unit = task.units[ui]
                a = greedy_action(actor, apply_trigger(obs[j], unit), spec)
                hits[ui] += bool(actions_match(a, unit.target_action, spec, cfg.tolerance)[0])
                counts[ui] += 1
            done_probes += take
        acts = greedy_action(actor, obs, spec)
        for i, env in enumerate(envs):
            res = env.step(acts[i])
            if res.terminated or res.truncated:
                obs[i] = env.reset(int(rng.integers(0, 2 ** 63)))
            else:
                obs[i] = res.state
        t += 1
    per_unit = hits[counts > 0] / counts[counts > 0]
    return float(per_unit.mean())
