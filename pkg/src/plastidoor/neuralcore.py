"""Small dense-network engine used by the PPO trainer and the interventions.

Every network keeps all trainable values in one flat ``theta`` vector.
Layer weights, biases and the optional layer-norm affine terms are numpy
views into that vector, laid out layer-major with weights before bias.
Optimizers, gradients and Hessian-vector products all operate on that
flat vector directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-5
SQRT2 = math.sqrt(2.0)

HEAD_KINDS = ("discrete", "continuous", "value")


class NonFiniteError(ValueError):
    """Raised when NaN or inf shows up where finite numbers are required."""


def init_orthogonal(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix scaled by ``gain``.

    QR of a standard-normal matrix, with the signs of ``diag(R)`` folded
    back into ``Q`` so the draw is uniform over the orthogonal group.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"orthogonal init needs positive shape, got {rows}x{cols}")
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d
    if rows < cols:
        q = q.T
    return gain * q


def _layer_norm(z: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv
    return gain * xhat + bias, xhat, inv


class LinearLayer:
    """One affine map plus its optional per-layer wrappers.

    ``weight``/``bias`` (and ``ln_gain``/``ln_bias`` when layer norm is on)
    are views into the owning network's ``theta``. ``sn_u``/``sn_v`` hold
    the persistent power-iteration directions when spectral normalization
    wraps this layer.
    """

    def __init__(self, n_in: int, n_out: int, layer_norm: bool = False):
        self.n_in = n_in
        self.n_out = n_out
        self.layer_norm = layer_norm
        self.weight: np.ndarray
        self.bias: np.ndarray
        self.ln_gain: np.ndarray | None = None
        self.ln_bias: np.ndarray | None = None
        self.w_start = self.b_start = self.ln_start = -1
        self.sn_u: np.ndarray | None = None
        self.sn_v: np.ndarray | None = None

    @property
    def n_params(self) -> int:
        return self.n_out * self.n_in + self.n_out + (2 * self.n_out if self.layer_norm else 0)

    @property
    def spectral(self) -> bool:
        return self.sn_u is not None

    def sigma(self) -> float:
        """Spectral estimate ``v^T W u`` using the stored directions."""
        return float(self.sn_v @ self.weight @ self.sn_u)

    def effective_weight(self) -> tuple[np.ndarray, float | None]:
        """Weight used in the forward pass and the divisor applied (None if raw)."""
        if self.sn_u is None:
            return self.weight, None
        s = self.sigma()
        if not np.isfinite(s) or abs(s) < 1e-12:
            return self.weight, None
        return self.weight / s, s

    def row_indices(self, i: int) -> np.ndarray:
        return self.w_start + i * self.n_in + np.arange(self.n_in)

    def col_indices(self, j: int) -> np.ndarray:
        return self.w_start + np.arange(self.n_out) * self.n_in + j


@dataclass
class ActivationTrace:
    """Everything the backward pass needs from one forward call."""

    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)      # affine output
    xhat: list[np.ndarray | None] = field(default_factory=list)
    inv_std: list[np.ndarray | None] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)     # after tanh (hidden) / raw (head)
    sigmas: list[float | None] = field(default_factory=list)
    squeeze: bool = False

    @property
    def output(self) -> np.ndarray:
        out = self.post[-1]
        return out[0] if self.squeeze else out


class PolicyNet:
    """Tanh MLP with a discrete, Gaussian-mean or scalar-value head.

    ``sizes`` lists every width from input to output, e.g. ``[4, 64, 64, 2]``
    for a three-layer CartPole actor. Layer norm, when enabled, follows every
    hidden linear layer and precedes the tanh.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        head_kind: str,
        rng: np.random.Generator | None = None,
        layer_norm: bool = False,
        gain: float = SQRT2,
        head_gain: float | None = None,
        log_std_init: float = 0.0,
    ):
        if head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {head_kind!r}")
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output width")
        if head_kind == "value" and sizes[-1] != 1:
            raise ValueError("value head must have a single output")
        self.sizes = [int(s) for s in sizes]
        self.head_kind = head_kind
        self.layer_norm = layer_norm
        self.gain = gain
        self.head_gain = gain if head_gain is None else head_gain
        self.layers = [
            LinearLayer(a, b, layer_norm=layer_norm and k < len(sizes) - 2)
            for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:]))
        ]
        n = sum(layer.n_params for layer in self.layers)
        if head_kind == "continuous":
            n += self.sizes[-1]
        self.theta = np.zeros(n)
        self._bind_views()
        if head_kind == "continuous":
            self.log_std[:] = log_std_init
        if rng is not None:
            self.initialize(rng)

    def _bind_views(self) -> None:
        off = 0
        for layer in self.layers:
            layer.w_start = off
            layer.weight = self.theta[off:off + layer.n_out * layer.n_in].reshape(layer.n_out, layer.n_in)
            off += layer.n_out * layer.n_in
            layer.b_start = off
            layer.bias = self.theta[off:off + layer.n_out]
            off += layer.n_out
            if layer.layer_norm:
                layer.ln_start = off
                layer.ln_gain = self.theta[off:off + layer.n_out]
                layer.ln_bias = self.theta[off + layer.n_out:off + 2 * layer.n_out]
                off += 2 * layer.n_out
        self.log_std_start = off
        self.log_std = self.theta[off:]

    def initialize(self, rng: np.random.Generator) -> None:
        for k, layer in enumerate(self.layers):
            g = self.head_gain if k == len(self.layers) - 1 else self.gain
            layer.weight[:] = init_orthogonal(layer.n_out, layer.n_in, g, rng)
            layer.bias[:] = 0.0
            if layer.layer_norm:
                layer.ln_gain[:] = 1.0
                layer.ln_bias[:] = 0.0

    @property
    def n_params(self) -> int:
        return self.theta.size

    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def weight_mask(self) -> np.ndarray:
        """Boolean mask over ``theta`` selecting linear-layer weights only."""
        mask = np.zeros(self.theta.size, dtype=bool)
        for layer in self.layers:
            mask[layer.w_start:layer.w_start + layer.n_out * layer.n_in] = True
        return mask

    def copy(self) -> "PolicyNet":
        other = PolicyNet(self.sizes, self.head_kind, layer_norm=self.layer_norm,
                          gain=self.gain, head_gain=self.head_gain)
        other.theta[:] = self.theta
        for mine, theirs in zip(self.layers, other.layers):
            if mine.sn_u is not None:
                theirs.sn_u = mine.sn_u.copy()
                theirs.sn_v = mine.sn_v.copy()
        return other

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x).output


def forward(net: PolicyNet, x: np.ndarray) -> ActivationTrace:
    """Run ``net`` on one state (1-D) or a batch of states (2-D)."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != net.sizes[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {net.sizes[0]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite network input")
    trace = ActivationTrace(squeeze=squeeze)
    h = x
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        w, s = layer.effective_weight()
        z = h @ w.T + layer.bias
        trace.inputs.append(h)
        trace.pre.append(z)
        trace.sigmas.append(s)
        if layer.layer_norm:
            y, xhat, inv = _layer_norm(z, layer.ln_gain, layer.ln_bias)
            trace.xhat.append(xhat)
            trace.inv_std.append(inv)
        else:
            y = z
            trace.xhat.append(None)
            trace.inv_std.append(None)
        h = y if k == last else np.tanh(y)
        trace.post.append(h)
    return trace


def backward(net: PolicyNet, trace: ActivationTrace, output_grad: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of a scalar loss given ``dL/d(output)``.

    Returns a flat vector aligned with ``net.theta``. The continuous head's
    log-std slot is left at zero; the loss that uses it adds its own term.
    """
    g = np.asarray(output_grad, dtype=float)
    if trace.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.post[-1].shape:
        raise ValueError(f"output grad shape {g.shape} does not match trace output {trace.post[-1].shape}")
    grad = np.zeros(net.theta.size)
    last = len(net.layers) - 1
    dh = g
    for k in range(last, -1, -1):
        layer = net.layers[k]
        if k == last:
            dy = dh
        else:
            dy = dh * (1.0 - trace.post[k] ** 2)
        if layer.layer_norm:
            xhat = trace.xhat[k]
            ln = layer.ln_start
            grad[ln:ln + layer.n_out] = np.sum(dy * xhat, axis=0)
            grad[ln + layer.n_out:ln + 2 * layer.n_out] = np.sum(dy, axis=0)
            dx = dy * layer.ln_gain
            dz = trace.inv_std[k] * (dx - dx.mean(axis=-1, keepdims=True)
                                     - xhat * np.mean(dx * xhat, axis=-1, keepdims=True))
        else:
            dz = dy
        h_in = trace.inputs[k]
        dw_eff = dz.T @ h_in
        w_eff, s = layer.effective_weight()
        if s is not None:
            # W_eff = W / (v^T W u) with u, v held constant
            dw = dw_eff / s - (np.sum(dw_eff * layer.weight) / s ** 2) * np.outer(layer.sn_v, layer.sn_u)
        else:
            dw = dw_eff
        grad[layer.w_start:layer.w_start + dw.size] = dw.ravel()
        grad[layer.b_start:layer.b_start + layer.n_out] = dz.sum(axis=0)
        if k > 0:
            dh = dz @ w_eff
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, n: int, weight_decay: float = 0.0) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), weight_decay=weight_decay)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment lengths differ")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NonFiniteError(f"non-finite gradient at {bad.size} entries (first index {bad[0]})")
    if state.weight_decay:
        grad = grad + state.weight_decay * params
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


class Adam:
    """Adam bound to a parameter count, with a settable learning rate."""

    def __init__(self, n: int, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.state = AdamState.fresh(n, weight_decay)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        adam_step(params, grad, self.state, self.lr)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite gradient")
        params -= self.lr * grad


class FlatParams:
    """Bare parameter vector for closures that are not networks (e.g. quadratics)."""

    def __init__(self, theta):
        self.theta = np.array(theta, dtype=float)


LossEval = Callable[[object], tuple[float, np.ndarray]]


def hvp(net, loss_eval: LossEval, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product by central differences of gradients.

    ``loss_eval(net)`` must return ``(loss, grad)`` at ``net.theta``.
    The parameters are restored bit-for-bit before returning.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != net.theta.shape:
        raise ValueError("direction length does not match parameter count")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("hvp direction must be non-zero")
    eps = 1e-3 / max(1.0, norm)
    saved = net.theta.copy()
    try:
        net.theta[:] = saved + eps * v
        _, g_plus = loss_eval(net)
        net.theta[:] = saved - eps * v
        _, g_minus = loss_eval(net)
    finally:
        net.theta[:] = saved
    return (g_plus - g_minus) / (2.0 * eps)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def net_to_dict(net: PolicyNet, adam: AdamState | None = None) -> dict:
    record = {
        "sizes": net.sizes,
        "head_kind": net.head_kind,
        "layer_norm": net.layer_norm,
        "gain": net.gain,
        "head_gain": net.head_gain,
        "theta": net.theta.tolist(),
        "spectral": {
            str(k): {"u": layer.sn_u.tolist(), "v": layer.sn_v.tolist()}
            for k, layer in enumerate(net.layers) if layer.sn_u is not None
        },
    }
    if adam is not None:
        record["adam"] = {
            "m": adam.m.tolist(), "v": adam.v.tolist(), "t": adam.t,
            "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
            "weight_decay": adam.weight_decay,
        }
    return record


def net_from_dict(record: dict) -> tuple[PolicyNet, AdamState | None]:
    net = PolicyNet(record["sizes"], record["head_kind"], layer_norm=record["layer_norm"],
                    gain=record["gain"], head_gain=record["head_gain"])
    theta = np.asarray(record["theta"], dtype=float)
    if theta.shape != net.theta.shape:
        raise ValueError("checkpoint parameter count does not match its layer shapes")
    net.theta[:] = theta
    for k, sn in record.get("spectral", {}).items():
        net.layers[int(k)].sn_u = np.asarray(sn["u"], dtype=float)
        net.layers[int(k)].sn_v = np.asarray(sn["v"], dtype=float)
    adam = None
    if "adam" in record:
        a = record["adam"]
        adam = AdamState(np.asarray(a["m"], dtype=float), np.asarray(a["v"], dtype=float), a["t"],
                         a["beta1"], a["beta2"], a["eps"], a["weight_decay"])
    return net, adam


def save_checkpoint(path, entries: dict[str, tuple[PolicyNet, AdamState | None]], meta: dict | None = None) -> None:
    """Write named networks (and their Adam states) to a JSON checkpoint.

    Python's float repr is the shortest string that parses back to the same
    double, so the JSON round trip is bit-exact.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "nets": {name: net_to_dict(net, adam) for name, (net, adam) in entries.items()},
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[dict[str, tuple[PolicyNet, AdamState | None]], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    nets = {name: net_from_dict(rec) for name, rec in payload["nets"].items()}
    return nets, payload.get("meta", {})
