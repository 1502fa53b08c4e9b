"""Plasticity interventions and their named combinations.

Each intervention attaches to training at one of four points:

* forward wrappers: spectral normalization of the actor's first layer,
  layer norm after hidden layers (built into the network),
* the optimizer: weight decay inside Adam, SAM replacing the step,
* post-step transforms: weight clipping (after every optimizer step),
* per-update transforms: shrink & perturb and ReDo, counted in PPO updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Union

import numpy as np

from .neuralcore import (
    SQRT2, Adam, AdamState, LinearLayer, LossEval, PolicyNet, _layer_norm, init_orthogonal,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShrinkPerturb:
    shrink: float = 0.999
    noise: float = 0.001
    period: int = 1

    def __post_init__(self):
        if not 0.0 < self.shrink <= 1.0:
            raise ValueError("shrink factor must lie in (0, 1]")


@dataclass(frozen=True)
class WeightClipping:
    bound: float = 0.3

    def __post_init__(self):
        if self.bound <= 0:
            raise ValueError("clipping bound must be positive")


@dataclass(frozen=True)
class SpectralNorm:
    iterations: int = 1


@dataclass(frozen=True)
class WeightDecay:
    coef: float = 1e-5


@dataclass(frozen=True)
class LayerNorm:
    pass


@dataclass(frozen=True)
class ReDo:
    period: int = 20
    threshold: float = 0.1

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("dormancy threshold must be non-negative")


@dataclass(frozen=True)
class SAM:
    rho: float = 0.01

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("SAM radius must be non-negative")


InterventionConfig = Union[ShrinkPerturb, WeightClipping, SpectralNorm, WeightDecay, LayerNorm, ReDo, SAM]

# short config keys for the eight settings (None is the empty stack)
SINGLE_KEYS = {
    "sp": ShrinkPerturb,
    "wc": WeightClipping,
    "sn": SpectralNorm,
    "wd": WeightDecay,
    "ln": LayerNorm,
    "redo": ReDo,
    "sam": SAM,
}
SETTINGS = ("none", "sp", "wc", "sn", "wd", "ln", "redo", "sam")

COMBINATIONS = {
    "swiss_cheese": ("wd", "ln"),
    "plastic": ("ln", "redo", "sam"),
    "lac": ("wc", "ln"),
    "slac": ("wc", "ln", "sam"),
    "ssw": ("wc", "sn", "sam"),
    "all": ("sp", "wc", "sn", "wd", "ln", "redo", "sam"),
}

COMBINATION_NAMES = {
    "swiss_cheese": "SwissCheese", "plastic": "Plastic", "lac": "Lac",
    "slac": "SLac", "ssw": "SSW", "all": "All",
}


@dataclass(frozen=True)
class CombinationSpec:
    name: str
    members: tuple[InterventionConfig, ...]

    def kinds(self) -> set[str]:
        return {_key_of(m) for m in self.members}


def _key_of(cfg: InterventionConfig) -> str:
    for key, cls in SINGLE_KEYS.items():
        if isinstance(cfg, cls):
            return key
    raise TypeError(f"not an intervention config: {cfg!r}")


def make_config(key: str, params: dict | None = None) -> InterventionConfig:
    cls = SINGLE_KEYS[key]
    params = params or {}
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in params.items() if k in names})


def combination(name: str, params: dict | None = None) -> CombinationSpec:
    """Resolve a config key to its member interventions.

    ``params`` maps intervention keys to keyword overrides, e.g.
    ``{"wc": {"bound": 0.2}}``.
    """
    params = params or {}
    key = name.lower()
    if key == "none":
        return CombinationSpec("None", ())
    if key in SINGLE_KEYS:
        return CombinationSpec(key, (make_config(key, params.get(key)),))
    if key in COMBINATIONS:
        members = tuple(make_config(k, params.get(k)) for k in COMBINATIONS[key])
        return CombinationSpec(COMBINATION_NAMES[key], members)
    raise ValueError(f"unknown intervention or combination {name!r}")


# -- weight perturbation ------------------------------------------------------

def shrink_perturb(net: PolicyNet, shrink: float, noise: float, rng: np.random.Generator) -> PolicyNet:
    """theta <- shrink * theta + noise * phi, phi drawn like a fresh init.

    Applies to linear weights and biases. Biases start at zero, so their
    noise draw is zero and they are only shrunk.
    """
    if not 0.0 < shrink <= 1.0:
        raise ValueError("shrink factor must lie in (0, 1]")
    if shrink == 1.0 and noise == 0.0:
        return net
    for k, layer in enumerate(net.layers):
        layer.weight *= shrink
        layer.bias *= shrink
        if noise:
            gain = net.head_gain if k == len(net.layers) - 1 else net.gain
            layer.weight += noise * init_orthogonal(layer.n_out, layer.n_in, gain, rng)
    return net


def weight_clip(net: PolicyNet, bound: float) -> PolicyNet:
    if bound <= 0:
        raise ValueError("clipping bound must be positive")
    for layer in net.layers:
        np.clip(layer.weight, -bound, bound, out=layer.weight)
    return net


# -- spectral normalization ---------------------------------------------------

class SpectralResult(NamedTuple):
    weight: np.ndarray      # W / sigma, for the forward pass
    u: np.ndarray           # input-side direction
    v: np.ndarray           # output-side direction
    sigma: float
    degenerate: bool        # zero matrix passed through unchanged


def spectral_normalize(w: np.ndarray, u: np.ndarray, iterations: int = 1) -> SpectralResult:
    """Power iteration on persistent direction ``u``; returns ``W / sigma``."""
    w = np.asarray(w, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.zeros(w.shape[0])
    for _ in range(max(1, iterations)):
        wu = w @ u
        nwu = np.linalg.norm(wu)
        if nwu == 0.0:
            return SpectralResult(w.copy(), u, v, 0.0, True)
        v = wu / nwu
        wtv = w.T @ v
        u = wtv / np.linalg.norm(wtv)
    sigma = float(v @ w @ u)
    return SpectralResult(w / sigma, u, v, sigma, False)


def attach_spectral_norm(layer: LinearLayer, rng: np.random.Generator) -> None:
    u = rng.standard_normal(layer.n_in)
    layer.sn_u = u / np.linalg.norm(u)
    refresh_spectral(layer, 1)


def refresh_spectral(layer: LinearLayer, iterations: int) -> None:
    """Advance the layer's persistent power-iteration state in place."""
    res = spectral_normalize(layer.weight, layer.sn_u, iterations)
    if res.degenerate:
        # keep a valid output direction so the sigma guard in forward trips cleanly
        if layer.sn_v is None:
            layer.sn_v = np.zeros(layer.n_out)
        return
    layer.sn_u, layer.sn_v = res.u, res.v


# -- layer norm ---------------------------------------------------------------

def layer_norm_forward(h: np.ndarray, gain, bias) -> np.ndarray:
    """(h - mean) / sqrt(var + 1e-5) * gain + bias, population variance."""
    h = np.asarray(h, dtype=float)
    out, _, _ = _layer_norm(h, np.asarray(gain, dtype=float), np.asarray(bias, dtype=float))
    return out


# -- ReDo ---------------------------------------------------------------------

def dormancy_scores(mean_abs: np.ndarray) -> np.ndarray:
    mean_abs = np.asarray(mean_abs, dtype=float)
    avg = mean_abs.mean()
    if avg == 0.0:
        return np.zeros_like(mean_abs)
    return mean_abs / avg


def redo_reset(net: PolicyNet, activation_stats: list[np.ndarray], threshold: float,
               rng: np.random.Generator, adam_state: AdamState | None = None) -> int:
    """Reinitialize dormant hidden neurons; returns how many were reset.

    ``activation_stats[k]`` holds E|h| for each neuron of hidden layer ``k``.
    Incoming weights are redrawn, the bias (and layer-norm affine entry) is
    reset, outgoing weights are zeroed and the matching Adam moments cleared.
    """
    total = 0
    for k, stats in enumerate(activation_stats):
        layer = net.layers[k]
        nxt = net.layers[k + 1]
        scores = dormancy_scores(stats)
        if not np.any(stats):
            log.info("hidden layer %d has all-zero activations; resetting every neuron", k)
        dormant = np.flatnonzero(scores <= threshold)
        if dormant.size == 0:
            continue
        fresh = init_orthogonal(layer.n_out, layer.n_in, net.gain, rng)
        touched = []
        for i in dormant:
            layer.weight[i] = fresh[i]
            layer.bias[i] = 0.0
            touched.append(layer.row_indices(i))
            touched.append(np.array([layer.b_start + i]))
            if layer.layer_norm:
                layer.ln_gain[i] = 1.0
                layer.ln_bias[i] = 0.0
                touched.append(np.array([layer.ln_start + i, layer.ln_start + layer.n_out + i]))
            nxt.weight[:, i] = 0.0
            touched.append(nxt.col_indices(i))
        if adam_state is not None:
            idx = np.concatenate(touched)
            adam_state.m[idx] = 0.0
            adam_state.v[idx] = 0.0
        total += dormant.size
    return total


# -- SAM ----------------------------------------------------------------------

def clip_grad_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / (norm + 1e-6))
    return grad


def sam_step(net, loss_eval: LossEval, rho: float, optimizer, max_grad_norm: float | None = None) -> float:
    """Sharpness-aware step: gradient at theta + rho * g/|g|, applied at theta.

    ``optimizer`` is anything with ``step(params, grad)`` (Adam or SGD).
    Returns the loss at the unperturbed point.
    """
    if rho < 0:
        raise ValueError("SAM radius must be non-negative")
    loss, g = loss_eval(net)
    norm = float(np.linalg.norm(g))
    if rho == 0.0 or norm == 0.0:
        optimizer.step(net.theta, clip_grad_norm(g, max_grad_norm))
        return loss
    saved = net.theta.copy()
    net.theta += (rho / norm) * g
    try:
        _, g_sam = loss_eval(net)
    finally:
        net.theta[:] = saved
    optimizer.step(net.theta, clip_grad_norm(g_sam, max_grad_norm))
    return loss


# -- hook pipeline ------------------------------------------------------------

@dataclass
class InterventionStack:
    """Ordered hooks realized from a CombinationSpec.

    Forward: spectral norm, then layer norm. Optimizer: weight decay inside
    Adam, SAM replacing the step. Per update: shrink & perturb, ReDo, then
    weight clipping so the bound holds whenever a snapshot is taken.
    """

    spec: CombinationSpec
    layer_norm: bool = False
    spectral: SpectralNorm | None = None
    weight_decay: float = 0.0
    sam: SAM | None = None
    weight_clip: WeightClipping | None = None
    shrink_perturb: ShrinkPerturb | None = None
    redo: ReDo | None = None
    update_count: int = field(default=0, init=False)

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def hooks(self) -> list[str]:
        order = []
        if self.spectral:
            order.append("forward:spectral_norm")
        if self.layer_norm:
            order.append("forward:layer_norm")
        if self.weight_decay:
            order.append("optimizer:weight_decay")
        if self.sam:
            order.append("optimizer:sam")
        if self.shrink_perturb:
            order.append("update:shrink_perturb")
        if self.redo:
            order.append("update:redo")
        if self.weight_clip:
            order.append("step:weight_clip")
        return order

    def prepare_actor(self, actor: PolicyNet, rng: np.random.Generator) -> None:
        if self.spectral is not None:
            attach_spectral_norm(actor.layers[0], rng)

    def make_optimizer(self, net: PolicyNet, lr: float) -> Adam:
        return Adam(net.n_params, lr, weight_decay=self.weight_decay)

    def optimizer_step(self, net: PolicyNet, loss_eval: LossEval, optimizer,
                       max_grad_norm: float | None) -> float:
        for layer in net.layers:
            if layer.spectral:
                refresh_spectral(layer, self.spectral.iterations)
        if self.weight_clip is not None:
            max_grad_norm = None
        rho = self.sam.rho if self.sam is not None else 0.0
        loss = sam_step(net, loss_eval, rho, optimizer, max_grad_norm)
        if self.weight_clip is not None:
            weight_clip(net, self.weight_clip.bound)
        return loss

    def after_update(self, nets: list[tuple[PolicyNet, AdamState, list[np.ndarray] | None]],
                     rng: np.random.Generator) -> dict:
        """Per-PPO-update transforms. Each entry: (net, adam state, hidden E|h| stats)."""
        self.update_count += 1
        info = {"redo_resets": 0}
        for net, adam_state, stats in nets:
            if self.shrink_perturb and self.update_count % self.shrink_perturb.period == 0:
                shrink_perturb(net, self.shrink_perturb.shrink, self.shrink_perturb.noise, rng)
            if self.redo and self.update_count % self.redo.period == 0 and stats is not None:
                info["redo_resets"] += redo_reset(net, stats, self.redo.threshold, rng, adam_state)
            if self.weight_clip is not None:
                weight_clip(net, self.weight_clip.bound)
        return info


def compose(stack: CombinationSpec | InterventionConfig | str | None, params: dict | None = None) -> InterventionStack:
    if stack is None:
        stack = CombinationSpec("None", ())
    elif isinstance(stack, str):
        stack = combination(stack, params)
    elif not isinstance(stack, CombinationSpec):
        stack = CombinationSpec(_key_of(stack), (stack,))
    out = InterventionStack(stack)
    for m in stack.members:
        if isinstance(m, LayerNorm):
            out.layer_norm = True
        elif isinstance(m, SpectralNorm):
            out.spectral = m
        elif isinstance(m, WeightDecay):
            out.weight_decay = m.coef
        elif isinstance(m, SAM):
            out.sam = m
        elif isinstance(m, WeightClipping):
            out.weight_clip = m
        elif isinstance(m, ShrinkPerturb):
            out.shrink_perturb = m
        elif isinstance(m, ReDo):
            out.redo = m
    return out

