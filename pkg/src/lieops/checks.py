"""Self-contained oracle checks for the numerical core.

Each check compares an analytic quantity against an independent route:
closed forms, central finite differences, numerical quadrature, or a
reference exponential. They are callable from tests and from the command
line runner, which turns any failure into a non-zero exit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
import scipy.linalg

from .expm import expm, expm_frechet, expm_vjp
from .inference import LaplacianParams, kl_laplacian_terms
from .networks import MlpNet
from .operators import (
    InitConfig,
    OperatorDictionary,
    init_dictionary,
    manifold_loss,
    manifold_loss_values,
)

FD_STEP = 1.0e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel(err: float, ref: float) -> float:
    return err / max(ref, 1.0e-12)


def _finite_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function over an array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        up = f()
        flat_x[i] = orig - h
        down = f()
        flat_x[i] = orig
        flat_g[i] = (up - down) / (2.0 * h)
    return g


def _grad_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    return _rel(float(np.linalg.norm((analytic - fd).reshape(-1))),
                float(np.linalg.norm(fd.reshape(-1))))


def check_expm_rotation(seed: int = 0) -> CheckResult:
    """expm of a plane rotation generator against the trigonometric form."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        theta = rng.uniform(-3.0, 3.0)
        A = theta * np.array([[0.0, -1.0], [1.0, 0.0]])
        expected = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        worst = max(worst, float(np.max(np.abs(expm(A) - expected))))
    return CheckResult("expm rotation closed form", worst, 1.0e-10)


def check_frechet_fd(seed: int = 0) -> CheckResult:
    """Frechet derivative against central differences of expm."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        A = rng.normal(size=(3, 3))
        A *= min(1.0, 3.0 / np.linalg.norm(A))
        E = rng.normal(size=(3, 3))
        _, L = expm_frechet(A, E)
        fd = (expm(A + FD_STEP * E) - expm(A - FD_STEP * E)) / (2.0 * FD_STEP)
        worst = max(worst, _grad_rel_err(L, fd))
    return CheckResult("expm Frechet vs finite differences", worst, 1.0e-6)


def check_adjoint_identity(seed: int = 0) -> CheckResult:
    """<G, L(A, E)> == <L*(A, G), E> over random directions."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    G = rng.normal(size=(4, 4))
    adj = expm_vjp(A, G)
    worst = 0.0
    for _ in range(100):
        E = rng.normal(size=(4, 4))
        _, L = expm_frechet(A, E)
        lhs = float(np.sum(G * L))
        rhs = float(np.sum(adj * E))
        worst = max(worst, _rel(abs(lhs - rhs), abs(lhs)))
    return CheckResult("expm adjoint identity", worst, 1.0e-8)


def check_manifold_grads(seed: int = 0, inject_error: bool = False) -> CheckResult:
    """All four manifold-loss gradients against finite differences."""
    rng = np.random.default_rng(seed)
    opdict = init_dictionary(3, 6, 2, InitConfig(alpha=0.1, beta_eig=0.5), rng, jitter=0.3)
    z = rng.normal(size=6)
    zp = rng.normal(size=6)
    c = rng.normal(size=3) * 0.5
    _, grads = manifold_loss(opdict, z, zp, c, stop_grad_target=False)
    if inject_error:
        grads.d_c = grads.d_c + 1.0e-2
    worst = 0.0

    def value():
        return manifold_loss(opdict, z, zp, c)[0]

    worst = max(worst, _grad_rel_err(grads.d_ops, _finite_difference(value, opdict.ops)))
    worst = max(worst, _grad_rel_err(grads.d_c, _finite_difference(value, c)))
    worst = max(worst, _grad_rel_err(grads.d_z, _finite_difference(value, z)))
    worst = max(worst, _grad_rel_err(grads.d_zp, _finite_difference(value, zp)))
    return CheckResult("manifold loss gradients vs finite differences", worst, 1.0e-5)


def _mlp_scalar_loss(net: MlpNet, x: np.ndarray, weights):
    out, cache = net.forward(x)
    if net.head == "laplacian":
        loss = float(np.sum(weights[0] * out.shift) + np.sum(weights[1] * out.log_scale))
        upstream = weights
    else:
        loss = float(np.sum(weights * out))
        upstream = weights
    return loss, cache, upstream


def check_mlp_grads(seed: int = 0) -> CheckResult:
    """Parameter and input gradients of every head type vs finite differences."""
    rng = np.random.default_rng(seed)
    nets = [
        MlpNet([5, 8, 6], 4, "plain", rng=rng),
        MlpNet([6, 8], 3, "laplacian", rng=rng),
        MlpNet([5, 7], 4, "projection", normalize=True, rng=rng),
    ]
    worst = 0.0
    for net in nets:
        x = rng.normal(size=(3, net.layer_dims[0]))
        if net.head == "laplacian":
            weights = (rng.normal(size=(3, net.out_dim)), rng.normal(size=(3, net.out_dim)))
        else:
            weights = rng.normal(size=(3, net.out_dim))
        _, cache, upstream = _mlp_scalar_loss(net, x, weights)
        grads, d_input = net.backward(cache, upstream)

        def value():
            return _mlp_scalar_loss(net, x, weights)[0]

        for analytic, param in zip(grads, net.parameters()):
            worst = max(worst, _grad_rel_err(analytic, _finite_difference(value, param)))
        worst = max(worst, _grad_rel_err(d_input, _finite_difference(value, x)))
    return CheckResult("network gradients vs finite differences", worst, 1.0e-5)


def _laplace_logpdf(x, mu, b):
    return -np.log(2.0 * b) - np.abs(x - mu) / b


def kl_laplacian_quadrature(mu_q, b_q, mu_p, b_p) -> float:
    """KL between univariate Laplacians by adaptive quadrature (the oracle)."""

    def integrand(x):
        return np.exp(_laplace_logpdf(x, mu_q, b_q)) * (
            _laplace_logpdf(x, mu_q, b_q) - _laplace_logpdf(x, mu_p, b_p)
        )

    lo, hi = sorted((mu_q, mu_p))
    total = 0.0
    for a, b in ((-np.inf, lo), (lo, hi), (hi, np.inf)):
        if a == b:
            continue
        val, _ = quad(integrand, a, b, limit=200)
        total += val
    return total


def check_kl_quadrature(seed: int = 0) -> CheckResult:
    """Closed-form Laplacian KL against numerical quadrature."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        mu_q, mu_p = rng.uniform(-1.0, 1.0, size=2)
        b_q, b_p = rng.uniform(0.05, 2.0, size=2)
        closed = float(
            kl_laplacian_terms(
                LaplacianParams.from_scale(np.array([mu_q]), np.array([b_q])),
                LaplacianParams.from_scale(np.array([mu_p]), np.array([b_p])),
            )[0]
        )
        reference = kl_laplacian_quadrature(mu_q, b_q, mu_p, b_p)
        worst = max(worst, _rel(abs(closed - reference), abs(reference)))
    return CheckResult("Laplacian KL vs quadrature", worst, 1.0e-6)


def check_block_equivalence(seed: int = 0) -> CheckResult:
    """Blockwise loss with b = d against a dense reference exponential."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        d, m = 6, 3
        ops = rng.normal(size=(m, 1, d, d)) * 0.4
        opdict = OperatorDictionary(ops, d)
        z = rng.normal(size=d)
        zp = rng.normal(size=d)
        c = rng.normal(size=m) * 0.5
        mine = float(manifold_loss_values(opdict, z, zp, c))
        dense = scipy.linalg.expm(np.einsum("m,mab->ab", c, ops[:, 0]))
        reference = float(np.sum((zp - dense @ z) ** 2))
        worst = max(worst, _rel(abs(mine - reference), abs(reference)))
    return CheckResult("blockwise loss vs dense reference (b = d)", worst, 1.0e-12)


def run_all_checks(seed: int = 0, inject_error: bool = False) -> list[CheckResult]:
    return [
        check_expm_rotation(seed),
        check_frechet_fd(seed),
        check_adjoint_identity(seed),
        check_manifold_grads(seed, inject_error=inject_error),
        check_mlp_grads(seed),
        check_kl_quadrature(seed),
        check_block_equivalence(seed),
    ]
