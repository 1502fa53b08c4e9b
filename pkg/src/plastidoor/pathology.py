"""Pathology monitors: weight magnitude, effective rank, loss sharpness.

Also the normalized gradient dot-product matrix used to look at how
backdoor and benign state gradients line up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .neuralcore import LossEval, PolicyNet, hvp

log = logging.getLogger(__name__)

POWER_EPS = 1e-12


@dataclass(frozen=True)
class PathologySnapshot:
    step: int
    weight_magnitude: float
    effective_rank_ratio: float
    sharpness: float

    def __post_init__(self):
        vals = (self.weight_magnitude, self.effective_rank_ratio, self.sharpness)
        if not all(np.isfinite(vals)):
            raise ValueError(f"non-finite pathology snapshot at step {self.step}: {vals}")
        if self.effective_rank_ratio > 1.0 + 1e-12:
            raise ValueError("effective rank ratio cannot exceed 1")


@dataclass
class PathologySeries:
    snapshots: list[PathologySnapshot] = field(default_factory=list)

    def append(self, snap: PathologySnapshot) -> None:
        if self.snapshots and snap.step <= self.snapshots[-1].step:
            raise ValueError("snapshot steps must be strictly increasing")
        self.snapshots.append(snap)

    def __len__(self):
        return len(self.snapshots)

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.snapshots])

    @property
    def steps(self) -> np.ndarray:
        return np.array([s.step for s in self.snapshots])

    def range(self, name: str) -> float:
        v = self.values(name)
        return float(v.max() - v.min()) if v.size else 0.0

    def ranges(self) -> dict[str, float]:
        return {k: self.range(k) for k in ("weight_magnitude", "effective_rank_ratio", "sharpness")}


def weight_magnitude(net: PolicyNet) -> float:
    """RMS over every linear-layer weight; biases excluded."""
    ws = net.weights()
    if not ws:
        raise ValueError("network has no linear layers")
    sq = sum(float(np.sum(w * w)) for w in ws)
    n = sum(w.size for w in ws)
    return float(np.sqrt(sq / n))


def effective_rank(w: np.ndarray) -> float:
    """exp of the entropy of the l1-normalized singular values (0 log 0 := 0)."""
    s = np.linalg.svd(np.asarray(w, dtype=float), compute_uv=False)
    total = s.sum()
    if total == 0.0:
        log.debug("effective rank of an all-zero matrix taken as 0")
        return 0.0
    p = s / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def effective_rank_ratio(w: np.ndarray, d: int) -> float:
    if d <= 0:
        raise ValueError("hidden size must be positive")
    return effective_rank(w) / d


def penultimate_rank_ratio(net: PolicyNet) -> float:
    layer = net.layers[-2] if len(net.layers) >= 2 else net.layers[-1]
    return effective_rank_ratio(layer.weight, layer.n_out)


def sharpness(net, loss_eval: LossEval, iterations: int = 20, rng: np.random.Generator | None = None) -> float:
    """Dominant Hessian eigenvalue by power iteration on Hessian-vector products.

    The Rayleigh quotient keeps its sign, so a dominant negative curvature
    comes back negative.
    """
    if iterations < 1:
        raise ValueError("need at least one power iteration")
    rng = rng if rng is not None else np.random.default_rng()
    v = rng.standard_normal(net.theta.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        hv = hvp(net, loss_eval, v)
        lam = float(v @ hv)
        norm = float(np.linalg.norm(hv))
        if norm < POWER_EPS:
            break
        v = hv / (norm + POWER_EPS)
    return lam


def snapshot(step: int, actor: PolicyNet, loss_eval: LossEval | None, iterations: int,
             rng: np.random.Generator) -> PathologySnapshot:
    sharp = sharpness(actor, loss_eval, iterations, rng) if loss_eval is not None else 0.0
    return PathologySnapshot(step, weight_magnitude(actor), penultimate_rank_ratio(actor), sharp)


class GradDot(NamedTuple):
    matrix: np.ndarray
    zero_rows: np.ndarray   # True where a state's gradient vanished


def normalized_dot(grads: np.ndarray) -> GradDot:
    """Cosine similarity between every pair of per-state gradients (rows)."""
    grads = np.asarray(grads, dtype=float)
    norms = np.linalg.norm(grads, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    unit = grads / safe[:, None]
    unit[zero] = 0.0
    m = np.clip(unit @ unit.T, -1.0, 1.0)
    return GradDot(m, zero)


def grad_dot_matrix(net: PolicyNet, states: np.ndarray,
                    loss_grad: Callable[[PolicyNet, np.ndarray], np.ndarray]) -> GradDot:
    """Normalized gradient dot products over a batch of states.

    ``loss_grad(net, state)`` returns the flat parameter gradient of the
    per-state loss.
    """
    grads = np.stack([loss_grad(net, s) for s in np.asarray(states, dtype=float)])
    if not np.all(np.isfinite(grads)):
        raise ValueError("per-state gradient is not finite")
    return normalized_dot(grads)
