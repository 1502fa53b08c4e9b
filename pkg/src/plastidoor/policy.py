"""Action distributions over actor outputs.

Discrete actors emit logits for a categorical distribution; continuous
actors emit the Gaussian mean and carry a state-independent log-std vector.
"""

from __future__ import annotations

import math

import numpy as np

from .envs import ActionSpec
from .neuralcore import PolicyNet, forward

LOG_2PI = math.log(2.0 * math.pi)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_prob(actor: PolicyNet, out: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Per-sample log-probability of ``actions`` given batched actor output."""
    if actor.head_kind == "discrete":
        lp = log_softmax(out)
        return lp[np.arange(len(out)), np.asarray(actions, dtype=int)]
    std = np.exp(actor.log_std)
    a = np.asarray(actions, dtype=float).reshape(out.shape)
    return np.sum(-0.5 * ((a - out) / std) ** 2 - actor.log_std - 0.5 * LOG_2PI, axis=-1)


def entropy(actor: PolicyNet, out: np.ndarray) -> np.ndarray:
    if actor.head_kind == "discrete":
        lp = log_softmax(out)
        return -np.sum(np.exp(lp) * lp, axis=-1)
    ent = np.sum(actor.log_std + 0.5 * (LOG_2PI + 1.0))
    return np.full(len(out), ent)


def sample(actor: PolicyNet, out: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if actor.head_kind == "discrete":
        p = np.exp(log_softmax(out))
        u = rng.random(len(out))
        a = (p.cumsum(axis=-1) < u[:, None]).sum(axis=-1)
        return np.minimum(a, out.shape[-1] - 1)
    return out + np.exp(actor.log_std) * rng.standard_normal(out.shape)


def mode(actor: PolicyNet, out: np.ndarray) -> np.ndarray:
    if actor.head_kind == "discrete":
        return np.argmax(out, axis=-1)
    return out


def greedy_action(actor: PolicyNet, states: np.ndarray, spec: ActionSpec) -> np.ndarray:
    """Deterministic action used for evaluation, clipped to the action bounds."""
    out = forward(actor, np.atleast_2d(states)).post[-1]
    a = mode(actor, out)
    if not spec.discrete:
        a = np.clip(a, spec.low, spec.high)
    return a


def actions_match(actions: np.ndarray, target, spec: ActionSpec, tol: float) -> np.ndarray:
    """Discrete: exact match. Continuous: Euclidean distance within ``tol``."""
    if spec.discrete:
        return np.asarray(actions).astype(int) == int(target)
    a = np.asarray(actions, dtype=float).reshape(len(actions), -1)
    return np.linalg.norm(a - np.asarray(target, dtype=float), axis=-1) <= tol + 1e-12
