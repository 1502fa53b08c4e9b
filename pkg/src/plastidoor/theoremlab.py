"""Synthetic check that SAM amplifies the influence of a backdoor state.

Setup: the backdoor gradient is g_i = alpha * u_b, the clean gradient is
g = beta * u_b + r with r orthogonal to u_b, and the average Hessian has
u_b as an eigenvector with eigenvalue lambda_b and no coupling between u_b
and its complement. Perturbing the data weight of the backdoor state by
eps gives a one-step parameter change whose projection on u_b moves at
rate -eta * alpha under plain gradient descent and at

    -eta * alpha * (1 + rho * lambda_b * |r|^2 / |g|^3)

under SAM.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .interventions import sam_step
from .neuralcore import SGD, FlatParams

EPS_FD = 1e-6
REL_TOL = 1e-4


@dataclass(frozen=True)
class SyntheticInstance:
    u_b: np.ndarray
    alpha: float
    beta: float
    r: np.ndarray
    lam_b: float
    hessian: np.ndarray
    rho: float
    eta: float

    @property
    def n(self) -> int:
        return self.u_b.size

    @property
    def g(self) -> np.ndarray:
        return self.beta * self.u_b + self.r

    @property
    def g_i(self) -> np.ndarray:
        return self.alpha * self.u_b

    @property
    def r_norm(self) -> float:
        return float(np.linalg.norm(self.r))

    def check(self) -> None:
        """Raise if the structural assumptions do not hold."""
        if not math.isclose(float(np.linalg.norm(self.u_b)), 1.0, abs_tol=1e-12):
            raise ValueError("u_b must be a unit vector")
        if abs(float(self.u_b @ self.r)) > 1e-12:
            raise ValueError("residual must be orthogonal to u_b")
        if np.linalg.norm(self.hessian @ self.u_b - self.lam_b * self.u_b) > 1e-10:
            raise ValueError("u_b must be an eigenvector of the Hessian with eigenvalue lambda_b")
        if abs(float(self.u_b @ self.hessian @ self.r)) > 1e-10:
            raise ValueError("Hessian must not couple u_b with the residual")


def make_instance(n: int, alpha: float, beta: float, r_norm: float, lam_b: float, rho: float, eta: float,
                  rng: np.random.Generator, u_b: np.ndarray | None = None) -> SyntheticInstance:
    """Random instance satisfying the assumptions; pass ``u_b`` to pin the backdoor direction."""
    if n < 2:
        raise ValueError("dimension must be at least 2")
    if r_norm <= 0:
        raise ValueError("clean residual must have positive norm")
    if min(alpha, beta, lam_b, rho, eta) <= 0:
        raise ValueError("alpha, beta, lambda_b, rho and eta must be positive")
    if u_b is None:
        u_b = rng.standard_normal(n)
    u_b = np.asarray(u_b, dtype=float)
    u_b = u_b / np.linalg.norm(u_b)
    # orthonormal basis whose first column is u_b; Q spans the complement
    basis, _ = np.linalg.qr(np.column_stack([u_b, rng.standard_normal((n, n - 1))]))
    q = basis[:, 1:]
    c = rng.standard_normal(n - 1)
    r = q @ (c * (r_norm / np.linalg.norm(c)))
    r -= (u_b @ r) * u_b
    d = rng.uniform(0.0, lam_b, n - 1)
    d = np.where(d == 0.0, lam_b / 2, d)
    hessian = lam_b * np.outer(u_b, u_b) + (q * d) @ q.T
    hessian = 0.5 * (hessian + hessian.T)
    inst = SyntheticInstance(u_b, float(alpha), float(beta), r, float(lam_b), hessian, float(rho), float(eta))
    inst.check()
    return inst


def amplification_factor(inst: SyntheticInstance) -> float:
    gnorm = math.hypot(inst.beta, inst.r_norm)
    return 1.0 + inst.rho * inst.lam_b * inst.r_norm ** 2 / gnorm ** 3


def erm_influence(inst: SyntheticInstance) -> float:
    return -inst.eta * inst.alpha


def sam_influence_analytic(inst: SyntheticInstance) -> float:
    return erm_influence(inst) * amplification_factor(inst)


def sam_delta(inst: SyntheticInstance, eps: float) -> np.ndarray:
    """One SAM step: -eta * (g(eps) + rho * H v(eps)), v the normalized gradient."""
    g = inst.g + eps * inst.g_i
    v = g / np.linalg.norm(g)
    return -inst.eta * (g + inst.rho * inst.hessian @ v)


def sam_influence_numeric(inst: SyntheticInstance, eps_fd: float = EPS_FD) -> float:
    if eps_fd <= 0:
        raise ValueError("finite-difference step must be positive")
    diff = sam_delta(inst, eps_fd) - sam_delta(inst, -eps_fd)
    return float(inst.u_b @ diff) / (2.0 * eps_fd)


def normalized_direction_derivative(inst: SyntheticInstance) -> np.ndarray:
    """d/d eps of g(eps)/|g(eps)| at 0: (I - v v^T) g_i / |g|."""
    g = inst.g
    gn = np.linalg.norm(g)
    v = g / gn
    return (inst.g_i - v * (v @ inst.g_i)) / gn


def quadratic_closure(inst: SyntheticInstance, eps: float):
    """L(theta) = 0.5 theta^T H theta + g(eps)^T theta, whose gradient at 0 is g(eps)."""
    b = inst.g + eps * inst.g_i

    def loss_eval(p):
        th = p.theta
        return float(0.5 * th @ inst.hessian @ th + b @ th), inst.hessian @ th + b

    return loss_eval


def sam_step_influence(inst: SyntheticInstance, eps_fd: float = 1e-4) -> float:
    """Projected influence measured by running the optimizer's own SAM step with SGD."""
    deltas = []
    for eps in (eps_fd, -eps_fd):
        p = FlatParams(np.zeros(inst.n))
        sam_step(p, quadratic_closure(inst, eps), inst.rho, SGD(inst.eta))
        deltas.append(p.theta.copy())
    return float(inst.u_b @ (deltas[0] - deltas[1])) / (2.0 * eps_fd)


def verify(inst: SyntheticInstance, eps_fd: float = EPS_FD) -> dict:
    erm = erm_influence(inst)
    analytic = sam_influence_analytic(inst)
    numeric = sam_influence_numeric(inst, eps_fd)
    factor = amplification_factor(inst)
    formula_ok = abs(numeric - analytic) <= REL_TOL * abs(analytic)
    boundary = factor == 1.0
    amplified = abs(analytic) > abs(erm)
    return {
        "erm": erm, "sam_analytic": analytic, "sam_numeric": numeric, "factor": factor,
        "boundary": boundary, "pass": bool(formula_ok and (amplified or boundary)),
    }


def random_instances(count: int, rng: np.random.Generator, n_range=(2, 20)):
    for _ in range(count):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        yield make_instance(
            n, alpha=rng.uniform(0.1, 2.0), beta=rng.uniform(0.1, 2.0), r_norm=rng.uniform(0.1, 2.0),
            lam_b=rng.uniform(0.1, 5.0), rho=rng.uniform(0.01, 0.5), eta=rng.uniform(1e-3, 0.1), rng=rng,
        )


TABLE_COLUMNS = ("instance", "n", "erm", "sam_analytic", "sam_numeric", "factor", "pass")


def verification_table(count: int, seed: int = 0) -> str:
    """CSV text with one verification row per random instance."""
    rng = np.random.Generator(np.random.Philox(seed))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for i, inst in enumerate(random_instances(count, rng)):
        rep = verify(inst)
        w.writerow([i, inst.n, repr(rep["erm"]), repr(rep["sam_analytic"]), repr(rep["sam_numeric"]),
                    repr(rep["factor"]), int(rep["pass"])])
    return buf.getvalue()
