"""Proximal Policy Optimization on the hand-rolled MLP engine."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .envs import ActionSpec, VecEnv
from .interventions import InterventionStack, compose
from .neuralcore import NonFiniteError, PolicyNet, backward, forward
from .policy import entropy, log_prob, log_softmax, sample


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; the run cannot continue."""

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    n_epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 3e-4
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float | None = 0.5
    n_envs: int = 1
    n_steps: int = 2048
    total_steps: int = 100_000
    finetune_steps: int = 50_000
    lr_schedule: str = "constant"       # "constant" | "linear"
    clip_schedule: str = "constant"
    hidden: int = 64
    head_gain: float | None = None      # None keeps the sqrt(2) used for every layer
    log_std_init: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.clip_range <= 0:
            raise ValueError("clip ratio must be positive")
        if self.n_steps < 1 or self.n_envs < 1:
            raise ValueError("rollout horizon must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown PPO config keys: {sorted(unknown)}")
        return cls(**d)

    def schedule(self, kind: str, base: float, progress: float) -> float:
        if kind == "linear":
            return base * max(1.0 - progress, 1e-3)
        return base


@dataclass
class Transition:
    state: np.ndarray
    action: object
    log_prob: float
    reward: float
    done: bool
    value: float
    poisoned: bool


class RolloutBuffer:
    """Fixed-size rollout stored as (n_steps, n_envs) arrays.

    ``rewards``/``values`` keep the benign experience. Poisoned slots carry
    their tampered reward and critic value separately so the benign
    advantage chain can be computed undisturbed.
    """

    def __init__(self, n_steps: int, n_envs: int, obs_dim: int, spec: ActionSpec):
        shape = (n_steps, n_envs)
        self.n_steps, self.n_envs = n_steps, n_envs
        self.spec = spec
        self.states = np.zeros(shape + (obs_dim,))
        if spec.discrete:
            self.actions = np.zeros(shape, dtype=int)
        else:
            self.actions = np.zeros(shape + (spec.dims,))
        self.log_probs = np.zeros(shape)
        self.rewards = np.zeros(shape)
        self.values = np.zeros(shape)
        self.next_values = np.zeros(shape)
        self.terminals = np.zeros(shape, dtype=bool)
        self.dones = np.zeros(shape, dtype=bool)
        self.poisoned = np.zeros(shape, dtype=bool)
        self.poison_rewards = np.zeros(shape)
        self.poison_values = np.zeros(shape)
        self.advantages: np.ndarray | None = None
        self.returns: np.ndarray | None = None

    def __len__(self) -> int:
        return self.n_steps * self.n_envs

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape((len(self),) + arr.shape[2:])

    def __getitem__(self, i: int) -> Transition:
        t, e = divmod(i, self.n_envs)
        p = bool(self.poisoned[t, e])
        a = self.actions[t, e]
        return Transition(
            self.states[t, e].copy(), int(a) if self.spec.discrete else a.copy(), float(self.log_probs[t, e]),
            float(self.poison_rewards[t, e] if p else self.rewards[t, e]), bool(self.dones[t, e] or p),
            float(self.poison_values[t, e] if p else self.values[t, e]), p,
        )

    def set_poisoned(self, i: int, state, action, logp: float, reward: float, value: float) -> None:
        t, e = divmod(i, self.n_envs)
        self.states[t, e] = state
        self.actions[t, e] = action
        self.log_probs[t, e] = logp
        self.poison_rewards[t, e] = reward
        self.poison_values[t, e] = value
        self.poisoned[t, e] = True

    @property
    def poisoned_count(self) -> int:
        return int(self.poisoned.sum())


def compute_gae(rewards, values, next_values, terminals, dones, gamma: float, lam: float):
    """Generalized advantage estimates over (T, n_envs) arrays.

    delta_t = r_t + gamma * V(s_{t+1}) * (1 - terminal_t) - V(s_t)
    A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}

    ``terminals`` marks true terminations (no bootstrap); ``dones`` marks any
    episode end, truncation included. When the two coincide this is the
    textbook recursion. Returns ``(advantages, returns)``.
    """
    one_d = np.ndim(rewards) == 1
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float).T).T
    values = np.atleast_2d(np.asarray(values, dtype=float).T).T
    next_values = np.atleast_2d(np.asarray(next_values, dtype=float).T).T
    terminals = np.atleast_2d(np.asarray(terminals, dtype=bool).T).T
    dones = np.atleast_2d(np.asarray(dones, dtype=bool).T).T
    if rewards.size == 0:
        raise ValueError("empty rollout")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    carry = np.zeros(rewards.shape[1])
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] * (~terminals[t]) - values[t]
        carry = delta + gamma * lam * (~dones[t]) * carry
        adv[t] = carry
    if one_d:
        return adv[:, 0], adv[:, 0] + values[:, 0]
    return adv, adv + values


def gae_for_buffer(buffer: RolloutBuffer, gamma: float, lam: float) -> None:
    adv, ret = compute_gae(buffer.rewards, buffer.values, buffer.next_values,
                           buffer.terminals, buffer.dones, gamma, lam)
    p = buffer.poisoned
    adv[p] = buffer.poison_rewards[p] - buffer.poison_values[p]
    ret[p] = buffer.poison_rewards[p]
    buffer.advantages, buffer.returns = adv, ret


@dataclass
class Agent:
    """Actor, critic, their optimizers and the intervention hooks of one run."""

    actor: PolicyNet
    critic: PolicyNet
    stack: InterventionStack
    spec: ActionSpec
    config: PpoConfig
    actor_opt: object = None
    critic_opt: object = None
    last_batch: dict | None = field(default=None, repr=False)
    updates: int = 0

    @classmethod
    def create(cls, obs_dim: int, spec: ActionSpec, config: PpoConfig, stack: InterventionStack | None,
               rng: np.random.Generator) -> "Agent":
        stack = stack or compose(None)
        h = config.hidden
        if spec.discrete:
            actor = PolicyNet([obs_dim, h, h, spec.n], "discrete", rng, layer_norm=stack.layer_norm,
                              head_gain=config.head_gain)
        else:
            actor = PolicyNet([obs_dim, h, h, h, spec.dims], "continuous", rng, layer_norm=stack.layer_norm,
                              head_gain=config.head_gain, log_std_init=config.log_std_init)
        critic = PolicyNet([obs_dim, h, h, 1], "value", rng, layer_norm=stack.layer_norm,
                           head_gain=1.0 if config.head_gain is not None else None)
        stack.prepare_actor(actor, rng)
        agent = cls(actor, critic, stack, spec, config)
        agent.actor_opt = stack.make_optimizer(actor, config.learning_rate)
        agent.critic_opt = stack.make_optimizer(critic, config.learning_rate)
        return agent

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        out = forward(self.actor, obs).post[-1]
        a = sample(self.actor, out, rng)
        return a, log_prob(self.actor, out, a)

    def value(self, obs: np.ndarray) -> np.ndarray:
        return forward(self.critic, obs).post[-1][:, 0]


Poisoner = Callable[[RolloutBuffer, PolicyNet, PolicyNet, ActionSpec], int]


def collect_rollout(agent: Agent, venv: VecEnv, n_steps: int, rng: np.random.Generator,
                    poisoner: Poisoner | None = None) -> RolloutBuffer:
    """Sample ``n_steps`` per environment from the current policy.

    The poisoner, if any, is applied once to the finished buffer.
    """
    if n_steps < 1:
        raise ValueError("horizon must be at least 1")
    if venv.obs is None:
        venv.reset()
    buf = RolloutBuffer(n_steps, len(venv), venv.obs_dim, venv.action_spec)
    v_cur = agent.value(venv.obs)
    for t in range(n_steps):
        obs = venv.obs
        actions, logp = agent.act(obs, rng)
        buf.states[t] = obs
        buf.actions[t] = actions
        buf.log_probs[t] = logp
        buf.values[t] = v_cur
        next_obs, rewards, term, trunc, final_obs = venv.step(actions)
        buf.rewards[t] = rewards
        buf.terminals[t] = term
        buf.dones[t] = term | trunc
        v_cur = agent.value(next_obs)
        buf.next_values[t] = v_cur
        cut = [i for i in final_obs if trunc[i] and not term[i]]
        if cut:
            buf.next_values[t, cut] = agent.value(np.stack([final_obs[i] for i in cut]))
    if poisoner is not None:
        poisoner(buf, agent.actor, agent.critic, venv.action_spec)
    return buf


# -- losses -------------------------------------------------------------------

def actor_loss(actor: PolicyNet, states: np.ndarray, actions: np.ndarray, old_log_probs: np.ndarray,
               advantages: np.ndarray, clip: float, ent_coef: float, with_grad: bool = True):
    """Clipped surrogate minus entropy bonus, averaged over the batch.

    Returns ``(loss, grad, info)``; ``grad`` is aligned with ``actor.theta``.
    """
    trace = forward(actor, states)
    out = trace.post[-1]
    n = len(out)
    logp = log_prob(actor, out, actions)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_obj = ratio * advantages
    clipped_obj = clipped * advantages
    obj = np.minimum(unclipped_obj, clipped_obj)
    ent = entropy(actor, out)
    loss = float(-obj.mean() - ent_coef * ent.mean())
    info = {
        "policy_loss": float(-obj.mean()),
        "entropy": float(ent.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "approx_kl": float(np.mean((ratio - 1.0) - (logp - old_log_probs))),
    }
    if not np.isfinite(loss):
        raise TrainingDiverged("actor loss is not finite", info)
    if not with_grad:
        return loss, None, info
    # gradient of -obj w.r.t. logp: the unclipped branch carries it whenever it is the minimum
    active = unclipped_obj <= clipped_obj
    dlogp = np.where(active, -ratio * advantages, 0.0) / n
    if actor.head_kind == "discrete":
        p = np.exp(log_softmax(out))
        onehot = np.zeros_like(out)
        onehot[np.arange(n), np.asarray(actions, dtype=int)] = 1.0
        dout = dlogp[:, None] * (onehot - p)
        if ent_coef:
            lp = np.log(np.maximum(p, 1e-300))
            dent = -p * (lp + ent[:, None])
            dout -= (ent_coef / n) * dent
        grad = backward(actor, trace, dout)
    else:
        std = np.exp(actor.log_std)
        a = np.asarray(actions, dtype=float).reshape(out.shape)
        z = (a - out) / std
        dout = dlogp[:, None] * (z / std)
        grad = backward(actor, trace, dout)
        dlogstd = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0)
        if ent_coef:
            dlogstd -= ent_coef
        grad[actor.log_std_start:] += dlogstd
    return loss, grad, info


def critic_loss(critic: PolicyNet, states: np.ndarray, returns: np.ndarray, vf_coef: float):
    trace = forward(critic, states)
    v = trace.post[-1][:, 0]
    diff = v - returns
    loss = float(vf_coef * np.mean(diff * diff))
    if not np.isfinite(loss):
        raise TrainingDiverged("critic loss is not finite", {"value_loss": loss})
    dout = (2.0 * vf_coef / len(v)) * diff[:, None]
    return loss, backward(critic, trace, dout), trace


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def actor_closure(batch: dict, clip: float, ent_coef: float):
    def loss_eval(net):
        loss, grad, _ = actor_loss(net, batch["states"], batch["actions"], batch["log_probs"],
                                   batch["advantages"], clip, ent_coef)
        return loss, grad
    return loss_eval


class JointParams:
    """Actor and critic parameters concatenated, for curvature of the combined loss."""

    def __init__(self, actor: PolicyNet, critic: PolicyNet):
        self.actor, self.critic = actor, critic
        self.split = actor.theta.size
        self.theta = np.concatenate([actor.theta, critic.theta])

    def push(self) -> None:
        self.actor.theta[:] = self.theta[:self.split]
        self.critic.theta[:] = self.theta[self.split:]


def joint_closure(batch: dict, clip: float, ent_coef: float, vf_coef: float):
    """Surrogate plus value loss over a JointParams; call ``push()`` afterwards to restore the nets."""
    def loss_eval(joint: JointParams):
        joint.push()
        la, ga, _ = actor_loss(joint.actor, batch["states"], batch["actions"], batch["log_probs"],
                               batch["advantages"], clip, ent_coef)
        lc, gc, _ = critic_loss(joint.critic, batch["states"], batch["returns"], vf_coef)
        return la + lc, np.concatenate([ga, gc])
    return loss_eval


def hidden_activity(net: PolicyNet, states: np.ndarray) -> list[np.ndarray]:
    """Mean |activation| per hidden neuron, one array per hidden layer."""
    trace = forward(net, states)
    return [np.mean(np.abs(h), axis=0) for h in trace.post[:-1]]


def ppo_update(agent: Agent, buffer: RolloutBuffer, rng: np.random.Generator, progress: float = 0.0) -> dict:
    """Several epochs of clipped-surrogate minibatch updates over one rollout.

    Every optimizer step goes through the intervention stack, which may
    swap in SAM and clips weights afterwards. Per-update transforms (shrink
    & perturb, ReDo) run once at the end.
    """
    cfg = agent.config
    if buffer.advantages is None:
        raise ValueError("compute GAE before updating")
    clip = cfg.schedule(cfg.clip_schedule, cfg.clip_range, progress)
    lr = cfg.schedule(cfg.lr_schedule, cfg.learning_rate, progress)
    agent.actor_opt.lr = lr
    agent.critic_opt.lr = lr
    states = buffer.flat("states")
    actions = buffer.flat("actions")
    old_lp = buffer.flat("log_probs")
    adv = buffer.advantages.reshape(-1)
    ret = buffer.returns.reshape(-1)
    n = len(buffer)
    bs = min(cfg.batch_size, n)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": [], "approx_kl": []}
    batch = None
    try:
        for _ in range(cfg.n_epochs):
            perm = rng.permutation(n)
            for start in range(0, n, bs):
                idx = perm[start:start + bs]
                batch = {
                    "states": states[idx], "actions": actions[idx], "log_probs": old_lp[idx],
                    "advantages": normalize_advantages(adv[idx]), "returns": ret[idx],
                }
                info = {}

                def actor_eval(net, batch=batch, info=info):
                    loss, grad, i = actor_loss(net, batch["states"], batch["actions"], batch["log_probs"],
                                               batch["advantages"], clip, cfg.ent_coef)
                    if not info:
                        info.update(i)
                    return loss, grad

                def critic_eval(net, batch=batch):
                    loss, grad, _ = critic_loss(net, batch["states"], batch["returns"], cfg.vf_coef)
                    stats["value_loss"].append(loss)
                    return loss, grad

                agent.stack.optimizer_step(agent.actor, actor_eval, agent.actor_opt, cfg.max_grad_norm)
                n_before = len(stats["value_loss"])
                agent.stack.optimizer_step(agent.critic, critic_eval, agent.critic_opt, cfg.max_grad_norm)
                del stats["value_loss"][n_before + 1:]
                for k in ("policy_loss", "entropy", "clip_fraction", "approx_kl"):
                    stats[k].append(info[k])
    except NonFiniteError as exc:
        raise TrainingDiverged(str(exc), {"update": agent.updates}) from exc
    agent.last_batch = {**batch, "clip": clip}
    actor_stats = hidden_activity(agent.actor, batch["states"]) if agent.stack.redo else None
    critic_stats = hidden_activity(agent.critic, batch["states"]) if agent.stack.redo else None
    extra = agent.stack.after_update(
        [(agent.actor, agent.actor_opt.state, actor_stats), (agent.critic, agent.critic_opt.state, critic_stats)],
        rng,
    )
    agent.updates += 1
    out = {k: float(np.mean(v)) for k, v in stats.items() if v}
    out.update(extra)
    out["poisoned"] = buffer.poisoned_count
    return out
