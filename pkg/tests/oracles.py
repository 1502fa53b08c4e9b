"""Independent reference computations the tests compare against.

These deliberately avoid the package's own code paths: brute-force sums,
dense eigen-decompositions and plain finite differences.
"""

import numpy as np


def fd_gradient(f, theta, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` at ``theta`` (restored afterwards)."""
    g = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + eps
        fp = f()
        theta[i] = old - eps
        fm = f()
        theta[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def discounted_returns(rewards, gamma):
    out = np.zeros(len(rewards))
    for t in range(len(rewards)):
        out[t] = sum(gamma ** k * rewards[t + k] for k in range(len(rewards) - t))
    return out


def dominant_eigenvalue(h):
    w = np.linalg.eigvalsh(h)
    return w[np.argmax(np.abs(w))]


def rolling_robust_z(x, window):
    """Loop-based centred median/MAD score, NaN at the edges."""
    x = np.asarray(x, dtype=float)
    half = window // 2
    z = np.full(x.size, np.nan)
    for i in range(half, x.size - half):
        w = x[i - half:i + half + 1]
        med = np.median(w)
        mad = np.median(np.abs(w - med))
        z[i] = abs(x[i] - med) / (1.4826 * mad + 1e-12)
    return z


def quadratic(h, b=None):
    """Closure for L(theta) = 0.5 theta^T H theta + b^T theta returning (loss, grad)."""
    h = np.asarray(h, dtype=float)
    b = np.zeros(len(h)) if b is None else np.asarray(b, dtype=float)

    def loss_eval(p):
        th = p.theta
        return float(0.5 * th @ h @ th + b @ th), h @ th + b

    return loss_eval


def random_symmetric(n, rng, spread=5.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    d = rng.uniform(-spread, spread, n)
    return (q * d) @ q.T


def gradient_check(net, x, rng, forward, backward, eps=1e-6):
    """Compare backward against finite differences of a random linear read-out of the output.

    Returns the worst-case error ratio ``|a - b| / (1e-4 |b| + 1e-7)``;
    values at or below 1 pass a 1e-4 relative check.
    """
    trace = forward(net, x)
    c = rng.standard_normal(trace.post[-1].shape)
    analytic = backward(net, trace, c)
    numeric = fd_gradient(lambda: float(np.sum(c * forward(net, x).post[-1])), net.theta, eps)
    return float(np.max(np.abs(analytic - numeric) / (1e-4 * np.abs(numeric) + 1e-7)))
