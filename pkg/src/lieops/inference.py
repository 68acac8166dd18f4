"""Coefficient inference for operator dictionaries.

Two routes are provided. ``fista_infer`` solves the l1-penalized transport
problem exactly with an accelerated proximal gradient method and serves as
the slow reference. The variational route draws reparameterized samples from
a Laplacian whose parameters come from an amortized encoder: ``J`` candidates
are scored by the manifold loss and the best one is kept, optionally pushed
through a soft threshold whose backward pass is treated as the identity
(straight-through), so exact zeros survive sampling.

Gradient conventions: derivatives of distribution parameters are taken with
respect to the shift and the *scale* (not its log); the network layer that
produced the log-scale converts at its own boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .operators import OperatorDictionary, manifold_loss_c_grads, manifold_loss_values


@dataclass
class LaplacianParams:
    """Componentwise Laplacian distribution: shift mu and log of scale b."""

    shift: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        if self.shift.shape != self.log_scale.shape:
            raise ValueError(
                f"shift shape {self.shift.shape} != log_scale shape {self.log_scale.shape}"
            )
        # log_scale may be -inf (a degenerate point mass at the shift) but
        # never NaN or +inf.
        if not np.all(np.isfinite(self.shift)):
            raise ValueError("shift must be finite")
        if np.any(np.isnan(self.log_scale)) or np.any(self.log_scale == np.inf):
            raise ValueError("log_scale must not be NaN or +inf")

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @classmethod
    def from_scale(cls, shift, scale) -> "LaplacianParams":
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(scale < 0.0):
            raise ValueError("scale must be >= 0")
        with np.errstate(divide="ignore"):
            return cls(np.asarray(shift, dtype=np.float64), np.log(scale))


@dataclass
class VariationalConfig:
    """Sampling knobs for the variational route.

    n_samples is the number of candidates scored per pair; threshold is the
    soft-threshold level applied when use_threshold is set; kl_weight scales
    the divergence term in the training objective.
    """

    n_samples: int = 1
    threshold: float = 0.01
    use_threshold: bool = False
    kl_weight: float = 5.0e-3

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.threshold < 0.0:
            raise ValueError("threshold must be >= 0")


# ---------------------------------------------------------------------------
# Reparameterized Laplacian sampling
# ---------------------------------------------------------------------------


def _open_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    # U(-1/2, 1/2) with both endpoints excluded; rng.random() can return 0.0
    # (mapping to -1/2 and a log of zero), so those draws are redone.
    u = rng.random(shape)
    while True:
        zero = u == 0.0
        if not zero.any():
            break
        u[zero] = rng.random(int(zero.sum()))
    return u - 0.5


def sample_laplacian(
    params: LaplacianParams, rng: np.random.Generator, n_samples: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw reparameterized samples s = shift + scale * noise.

    Returns ``(sample, noise)``. The noise factor is a deterministic function
    of the uniform draw, so for a fixed draw the sample is differentiable in
    the parameters: ds/dshift = 1 and ds/dscale = noise.

    When ``n_samples`` is given, a leading axis of that length is added.
    """
    shape = params.shift.shape if n_samples is None else (n_samples,) + params.shift.shape
    eps = _open_uniform(rng, shape)
    noise = np.sign(eps) * np.log1p(-2.0 * np.abs(eps))
    return params.shift + params.scale * noise, noise


def soft_threshold(x: np.ndarray, level) -> np.ndarray:
    """Proximal operator of the l1 norm: sign(x) * max(|x| - level, 0)."""
    return np.sign(x) * np.maximum(np.abs(x) - level, 0.0)


def soft_threshold_st(s: np.ndarray, threshold: float) -> np.ndarray:
    """Soft threshold with a straight-through backward contract.

    The forward value is the ordinary soft threshold; callers that backprop
    through it must pass the upstream gradient along unchanged, as if this
    function were the identity.
    """
    if threshold < 0.0:
        raise ValueError("threshold must be >= 0")
    return soft_threshold(s, threshold)


@dataclass
class BestOfMany:
    """Winner of a best-of-J candidate draw, with what backward needs."""

    c: np.ndarray        # thresholded coefficients of the chosen sample
    index: np.ndarray    # chosen sample index (scalar or per pair)
    noise: np.ndarray    # reparameterization factor of the chosen sample
    loss: np.ndarray     # manifold loss of the chosen sample


def best_of_many(
    opdict: OperatorDictionary,
    z: np.ndarray,
    zp: np.ndarray,
    params: LaplacianParams,
    cfg: VariationalConfig,
    rng: np.random.Generator,
) -> BestOfMany:
    """Draw J candidates for one pair and keep the one with least loss.

    Ties are resolved toward the lowest sample index. Gradients are defined
    to flow only through the chosen sample (via its stored noise factor).
    """
    res = best_of_many_batch(opdict, z[None], zp[None], _add_axis(params), cfg, rng)
    return BestOfMany(c=res.c[0], index=res.index[0], noise=res.noise[0], loss=res.loss[0])


def _add_axis(params: LaplacianParams) -> LaplacianParams:
    return LaplacianParams(params.shift[None], params.log_scale[None])


def best_of_many_batch(
    opdict: OperatorDictionary,
    Z: np.ndarray,
    Zp: np.ndarray,
    params: LaplacianParams,
    cfg: VariationalConfig,
    rng: np.random.Generator,
) -> BestOfMany:
    """Vectorized best-of-J over a batch of pairs (one argmin per pair)."""
    n, m = params.shift.shape
    eps = _open_uniform(rng, (n, cfg.n_samples, m))
    noise = np.sign(eps) * np.log1p(-2.0 * np.abs(eps))
    s = params.shift[:, None, :] + params.scale[:, None, :] * noise
    c = soft_threshold_st(s, cfg.threshold) if cfg.use_threshold else s
    losses = manifold_loss_values(opdict, Z[:, None, :], Zp[:, None, :], c)
    idx = np.argmin(losses, axis=1)
    rows = np.arange(n)
    return BestOfMany(
        c=c[rows, idx], index=idx, noise=noise[rows, idx], loss=losses[rows, idx]
    )


# ---------------------------------------------------------------------------
# Laplacian-Laplacian KL divergence
# ---------------------------------------------------------------------------


def _check_scales(params: LaplacianParams, name: str) -> np.ndarray:
    scale = params.scale
    if np.any(scale <= 0.0) or not np.all(np.isfinite(scale)):
        raise ValueError(f"{name} scale must be positive and finite")
    return scale


def kl_laplacian_terms(q: LaplacianParams, p: LaplacianParams) -> np.ndarray:
    """Componentwise KL(q || p) between univariate Laplacians.

    Closed form per component:
        log(b_p / b_q) + (b_q * exp(-|mu_q - mu_p| / b_q) + |mu_q - mu_p|) / b_p - 1
    """
    b_q = _check_scales(q, "q")
    b_p = _check_scales(p, "p")
    if q.shift.shape != p.shift.shape:
        raise ValueError(f"q shape {q.shift.shape} != p shape {p.shift.shape}")
    delta = np.abs(q.shift - p.shift)
    return p.log_scale - q.log_scale + (b_q * np.exp(-delta / b_q) + delta) / b_p - 1.0


def kl_laplacian(q: LaplacianParams, p: LaplacianParams) -> float:
    """Sum of the componentwise Laplacian KL over every component."""
    return float(np.sum(kl_laplacian_terms(q, p)))


def kl_laplacian_grads(q: LaplacianParams, p: LaplacianParams):
    """Derivatives of the summed KL w.r.t. (mu_q, b_q, mu_p, b_p).

    Scale derivatives are w.r.t. the scales themselves, matching the
    convention used throughout the package.
    """
    b_q = _check_scales(q, "q")
    b_p = _check_scales(p, "p")
    diff = q.shift - p.shift
    delta = np.abs(diff)
    sgn = np.sign(diff)
    e = np.exp(-delta / b_q)
    d_mu_q = sgn * (1.0 - e) / b_p
    d_b_q = -1.0 / b_q + e * (1.0 + delta / b_q) / b_p
    d_b_p = 1.0 / b_p - (b_q * e + delta) / b_p**2
    return d_mu_q, d_b_q, -d_mu_q, d_b_p


# ---------------------------------------------------------------------------
# FISTA
# ---------------------------------------------------------------------------


@dataclass
class StepSizePolicy:
    """Backtracking line-search settings for FISTA."""

    init_step: float = 1.0
    shrink: float = 0.5
    min_step: float = 1.0e-18

    def __post_init__(self):
        if self.init_step <= 0.0 or not (0.0 < self.shrink < 1.0):
            raise ValueError("init_step must be > 0 and shrink in (0, 1)")


def fista_infer(
    opdict: OperatorDictionary,
    z: np.ndarray,
    zp: np.ndarray,
    l1_weight: float,
    max_iters: int = 200,
    step_policy: StepSizePolicy | None = None,
    tol: float = 1.0e-9,
) -> np.ndarray:
    """Minimize ||z' - T(c) z||^2 + l1_weight * ||c||_1 over coefficients.

    Accelerated proximal gradient from a zero start, with per-pair
    backtracking step sizes and objective-based momentum restarts. ``z`` and
    ``zp`` may be single vectors or batches of pairs; each pair is solved
    independently (vectorized).

    Raises:
        DivergenceError: if the objective turns non-finite, or backtracking
            cannot find a usable step.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    policy = step_policy or StepSizePolicy()
    Z = np.asarray(z, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    Zp = np.atleast_2d(np.asarray(zp, dtype=np.float64))
    n = Z.shape[0]
    m = opdict.m

    C = np.zeros((n, m))
    Y = C.copy()
    t = np.ones(n)
    eta = np.full(n, policy.init_step)
    F_prev = manifold_loss_values(opdict, Z, Zp, C)

    for k in range(max_iters):
        # Overflow inside the exponential is turned into a DivergenceError by
        # the finiteness checks rather than a warning.
        with np.errstate(over="ignore", invalid="ignore"):
            f_y, g_y = manifold_loss_c_grads(opdict, Z, Zp, Y)
        if not np.all(np.isfinite(f_y)):
            raise DivergenceError("non-finite smooth loss in FISTA", iteration=k)
        # Backtrack per pair until the quadratic upper bound holds everywhere.
        while True:
            cand = soft_threshold(Y - eta[:, None] * g_y, eta[:, None] * l1_weight)
            with np.errstate(over="ignore", invalid="ignore"):
                f_cand = manifold_loss_values(opdict, Z, Zp, cand)
            diff = cand - Y
            bound = (
                f_y
                + np.sum(g_y * diff, axis=1)
                + np.sum(diff * diff, axis=1) / (2.0 * eta)
            )
            ok = f_cand <= bound + 1.0e-12
            if ok.all():
                break
            eta = np.where(ok, eta, eta * policy.shrink)
            if np.any(eta < policy.min_step):
                raise DivergenceError("FISTA backtracking step underflow", iteration=k)
        if not np.all(np.isfinite(f_cand)):
            raise DivergenceError("non-finite candidate loss in FISTA", iteration=k)

        F_new = f_cand + l1_weight * np.sum(np.abs(cand), axis=1)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Y = cand + (((t - 1.0) / t_next))[:, None] * (cand - C)
        # Momentum restart where the objective went up.
        restart = F_new > F_prev
        if restart.any():
            Y[restart] = cand[restart]
            t_next[restart] = 1.0
        moved = np.linalg.norm(cand - C, axis=1)
        C, t, F_prev = cand, t_next, F_new
        if np.all(moved <= tol * (1.0 + np.linalg.norm(C, axis=1))):
            break

    return C[0] if single else C
