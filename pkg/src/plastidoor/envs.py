"""Classic-control benign tasks: CartPole, MountainCar and Pendulum.

Dynamics, constants and termination rules mirror the standard Gym
simulators (CartPole-v1, MountainCar-v0, Pendulum-v1). Each task keeps its
constants in one frozen record so they can be audited in one place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TASK_IDS = ("cartpole", "mountaincar", "pendulum")


@dataclass(frozen=True)
class ActionSpec:
    kind: str                      # "discrete" | "continuous"
    n: int = 0
    low: tuple[float, ...] = ()
    high: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "discrete":
            if self.n < 2:
                raise ValueError("discrete action space needs n >= 2")
        elif self.kind == "continuous":
            if len(self.low) != len(self.high) or not self.low:
                raise ValueError("continuous bounds must be non-empty and matched")
            if any(not (math.isfinite(a) and math.isfinite(b) and a < b) for a, b in zip(self.low, self.high)):
                raise ValueError("continuous bounds must be finite with low < high")
        else:
            raise ValueError(f"unknown action kind {self.kind!r}")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def dims(self) -> int:
        return 1 if self.discrete else len(self.low)

    def clip(self, action):
        if self.discrete:
            return action
        return np.clip(np.asarray(action, dtype=float), self.low, self.high)


class StepResult(NamedTuple):
    state: np.ndarray
    reward: float
    terminated: bool
    truncated: bool


@dataclass(frozen=True)
class CartPoleConstants:
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5            # half the pole length
    force_mag: float = 10.0
    tau: float = 0.02
    theta_threshold: float = 12 * 2 * math.pi / 360
    x_threshold: float = 2.4
    max_steps: int = 500


@dataclass(frozen=True)
class MountainCarConstants:
    min_position: float = -1.2
    max_position: float = 0.6
    max_speed: float = 0.07
    goal_position: float = 0.5
    goal_velocity: float = 0.0
    force: float = 0.001
    gravity: float = 0.0025
    max_steps: int = 200


@dataclass(frozen=True)
class PendulumConstants:
    max_speed: float = 8.0
    max_torque: float = 2.0
    dt: float = 0.05
    g: float = 10.0
    m: float = 1.0
    l: float = 1.0
    max_steps: int = 200


class Env:
    task_id: str
    obs_dim: int
    action_spec: ActionSpec
    max_steps: int

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.state = None

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.steps = 0
        self._reset_state()
        return self.observe()

    def step(self, action) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        reward, terminated = self._advance(action)
        self.steps += 1
        truncated = (not terminated) and self.steps >= self.max_steps
        return StepResult(self.observe(), reward, terminated, truncated)

    def _check_discrete(self, action) -> int:
        a = int(action)
        if a != action or not 0 <= a < self.action_spec.n:
            raise ValueError(f"invalid action {action!r} for {self.task_id}")
        return a


class CartPole(Env):
    task_id = "cartpole"
    obs_dim = 4
    action_spec = ActionSpec("discrete", n=2)

    def __init__(self, seed=None, constants: CartPoleConstants = CartPoleConstants()):
        super().__init__(seed)
        self.c = constants
        self.max_steps = constants.max_steps

    def _reset_state(self):
        self.state = list(self.rng.uniform(-0.05, 0.05, size=4))

    def observe(self):
        return np.array(self.state, dtype=float)

    def _advance(self, action):
        a = self._check_discrete(action)
        c = self.c
        x, x_dot, theta, theta_dot = self.state
        force = c.force_mag if a == 1 else -c.force_mag
        costheta = math.cos(theta)
        sintheta = math.sin(theta)
        total_mass = c.masspole + c.masscart
        polemass_length = c.masspole * c.length
        temp = (force + polemass_length * theta_dot ** 2 * sintheta) / total_mass
        thetaacc = (c.gravity * sintheta - costheta * temp) / (
            c.length * (4.0 / 3.0 - c.masspole * costheta ** 2 / total_mass))
        xacc = temp - polemass_length * thetaacc * costheta / total_mass
        x = x + c.tau * x_dot
        x_dot = x_dot + c.tau * xacc
        theta = theta + c.tau * theta_dot
        theta_dot = theta_dot + c.tau * thetaacc
        self.state = [x, x_dot, theta, theta_dot]
        terminated = x < -c.x_threshold or x > c.x_threshold or theta < -c.theta_threshold or theta > c.theta_threshold
        return 1.0, bool(terminated)


class MountainCar(Env):
    task_id = "mountaincar"
    obs_dim = 2
    action_spec = ActionSpec("discrete", n=3)

    def __init__(self, seed=None, constants: MountainCarConstants = MountainCarConstants()):
        super().__init__(seed)
        self.c = constants
        self.max_steps = constants.max_steps

    def _reset_state(self):
        self.state = [float(self.rng.uniform(-0.6, -0.4)), 0.0]

    def observe(self):
        return np.array(self.state, dtype=float)

    def _advance(self, action):
        a = self._check_discrete(action)
        c = self.c
        position, velocity = self.state
        velocity += (a - 1) * c.force + math.cos(3 * position) * (-c.gravity)
        velocity = min(max(velocity, -c.max_speed), c.max_speed)
        position += velocity
        position = min(max(position, c.min_position), c.max_position)
        if position == c.min_position and velocity < 0:
            velocity = 0.0
        self.state = [position, velocity]
        terminated = position >= c.goal_position and velocity >= c.goal_velocity
        return -1.0, bool(terminated)


def _angle_normalize(x: float) -> float:
    return ((x + math.pi) % (2 * math.pi)) - math.pi


class Pendulum(Env):
    task_id = "pendulum"
    obs_dim = 3
    action_spec = ActionSpec("continuous", low=(-2.0,), high=(2.0,))

    def __init__(self, seed=None, constants: PendulumConstants = PendulumConstants()):
        super().__init__(seed)
        self.c = constants
        self.max_steps = constants.max_steps

    def _reset_state(self):
        self.state = [float(self.rng.uniform(-math.pi, math.pi)), float(self.rng.uniform(-1.0, 1.0))]

    def observe(self):
        th, thdot = self.state
        return np.array([math.cos(th), math.sin(th), thdot])

    def _advance(self, action):
        c = self.c
        u = float(np.clip(np.ravel(np.asarray(action, dtype=float))[0], -c.max_torque, c.max_torque))
        th, thdot = self.state
        cost = _angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
        newthdot = thdot + (3 * c.g / (2 * c.l) * math.sin(th) + 3.0 / (c.m * c.l ** 2) * u) * c.dt
        newthdot = min(max(newthdot, -c.max_speed), c.max_speed)
        newth = th + newthdot * c.dt
        self.state = [newth, newthdot]
        return -cost, False


_REGISTRY = {"cartpole": CartPole, "mountaincar": MountainCar, "pendulum": Pendulum}


def make_env(task_id: str, seed: int | None = None) -> Env:
    try:
        return _REGISTRY[task_id](seed)
    except KeyError:
        raise ValueError(f"unknown task id {task_id!r}; expected one of {TASK_IDS}") from None


class VecEnv:
    """Lock-step copies of one task with automatic reset.

    ``step`` returns the post-reset observation for finished episodes and
    keeps the true final observation in ``final_obs`` so truncated episodes
    can still bootstrap from it.
    """

    def __init__(self, task_id: str, n: int, rng: np.random.Generator):
        self.envs = [make_env(task_id) for _ in range(n)]
        self.rng = rng
        self.task_id = task_id
        self.action_spec = self.envs[0].action_spec
        self.obs_dim = self.envs[0].obs_dim
        self.episode_returns = np.zeros(n)
        self.completed_returns: list[float] = []
        self.obs = None

    def __len__(self):
        return len(self.envs)

    def reset(self) -> np.ndarray:
        seeds = self.rng.integers(0, 2 ** 63, size=len(self.envs))
        self.obs = np.stack([env.reset(int(s)) for env, s in zip(self.envs, seeds)])
        self.episode_returns[:] = 0.0
        return self.obs

    def step(self, actions):
        n = len(self.envs)
        next_obs = np.empty_like(self.obs)
        rewards = np.empty(n)
        terminated = np.zeros(n, dtype=bool)
        truncated = np.zeros(n, dtype=bool)
        final_obs = {}
        spec = self.action_spec
        for i, env in enumerate(self.envs):
            a = actions[i] if spec.discrete else spec.clip(actions[i])
            res = env.step(a)
            rewards[i] = res.reward
            terminated[i] = res.terminated
            truncated[i] = res.truncated
            self.episode_returns[i] += res.reward
            if res.terminated or res.truncated:
                final_obs[i] = res.state
                self.completed_returns.append(float(self.episode_returns[i]))
                self.episode_returns[i] = 0.0
                next_obs[i] = env.reset(int(self.rng.integers(0, 2 ** 63)))
            else:
                next_obs[i] = res.state
        self.obs = next_obs
        return next_obs, rewards, terminated, truncated, final_obs
