"""Dictionaries of Lie group operators acting on feature vectors.

A dictionary holds M generators. Each generator is stored block-diagonally as
``d / b`` independent blocks of shape ``(b, b)``; ``b = d`` recovers a single
dense generator. A coefficient vector ``c`` selects the group element

    T(c) = expm(sum_m c_m * Psi_m)

computed per block, which transports a feature vector along the learned
manifold. The squared transport error between a point pair, summed over
blocks, is the manifold reconstruction loss; its gradients with respect to
the generators, the coefficients, and both features are analytic, built on
the adjoint of the matrix exponential rather than autodiff.

Shapes: generators live in an array ``ops`` of shape ``(m, n_blocks, b, b)``,
features are ``(d,)`` or ``(N, d)``, coefficients ``(m,)`` or ``(N, m)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expm import expm, expm_frechet, expm_vjp

CHECKPOINT_FORMAT = "lieops-checkpoint-v1"


@dataclass
class InitConfig:
    """Eigenstructure of freshly initialized generators.

    Each 2x2 cell on the block diagonal is [[alpha, beta], [-beta, alpha]],
    giving the conjugate eigenvalue pair alpha +/- i*beta: nearly pure
    rotations when alpha is small, which keeps early transports bounded.
    """

    alpha: float = 1.0e-4
    beta_eig: float = 6.0


class OperatorDictionary:
    """M block-diagonal generators over a d-dimensional feature space."""

    def __init__(self, ops: np.ndarray, dim: int):
        ops = np.asarray(ops, dtype=np.float64)
        if ops.ndim != 4:
            raise ValueError(f"ops must have shape (m, n_blocks, b, b), got {ops.shape}")
        m, n_blocks, b, b2 = ops.shape
        if b != b2 or m < 1 or b < 1:
            raise ValueError(f"ops must have shape (m, n_blocks, b, b) with m, b >= 1, got {ops.shape}")
        if n_blocks * b != dim:
            raise ValueError(f"block layout {n_blocks} x {b} does not tile dim {dim}")
        if not np.all(np.isfinite(ops)):
            raise ValueError("ops contains non-finite entries")
        self.ops = ops
        self.dim = dim

    @property
    def m(self) -> int:
        return self.ops.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.ops.shape[1]

    @property
    def block_size(self) -> int:
        return self.ops.shape[2]

    def copy(self) -> "OperatorDictionary":
        return OperatorDictionary(self.ops.copy(), self.dim)

    def to_json_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": "operator_dictionary",
            "m": self.m,
            "dim": self.dim,
            "block_size": self.block_size,
            "operators": [
                [list(map(float, block.reshape(-1))) for block in op] for op in self.ops
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "OperatorDictionary":
        if data.get("kind") != "operator_dictionary":
            raise ValueError(f"not an operator dictionary checkpoint: kind={data.get('kind')!r}")
        b = int(data["block_size"])
        dim = int(data["dim"])
        ops = np.array(
            [[np.array(block, dtype=np.float64).reshape(b, b) for block in op]
             for op in data["operators"]]
        )
        return cls(ops, dim)


def save_dictionary(opdict: OperatorDictionary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(opdict.to_json_dict()) + "\n", encoding="utf-8")


def load_dictionary(path: str | Path) -> OperatorDictionary:
    return OperatorDictionary.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_dictionary(
    m: int,
    dim: int,
    block_size: int,
    cfg: InitConfig,
    rng: np.random.Generator,
    *,
    allow_odd: bool = False,
    jitter: float = 0.0,
) -> OperatorDictionary:
    """Build a dictionary whose blocks carry the configured eigenstructure.

    Every block is tiled with 2x2 cells [[alpha, beta], [-beta, alpha]] along
    its diagonal. Odd block sizes are rejected unless ``allow_odd`` enables a
    trailing 1x1 cell holding ``alpha`` (needed e.g. for 3-d data). When
    ``jitter`` is positive, Gaussian noise of that scale is added to every
    entry to break the symmetry between otherwise identical generators; the
    default of zero keeps the construction deterministic.

    Raises:
        ValueError: if ``block_size`` does not divide ``dim``, or is odd
            without ``allow_odd``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if block_size < 1 or dim % block_size != 0:
        raise ValueError(f"block_size {block_size} must divide dim {dim}")
    if block_size % 2 != 0 and not allow_odd:
        raise ValueError(
            f"block_size {block_size} is odd; eigenvalue pairs need 2x2 cells "
            "(pass allow_odd=True to append a trailing 1x1 cell)"
        )
    block = np.zeros((block_size, block_size))
    for i in range(block_size // 2):
        block[2 * i, 2 * i] = cfg.alpha
        block[2 * i, 2 * i + 1] = cfg.beta_eig
        block[2 * i + 1, 2 * i] = -cfg.beta_eig
        block[2 * i + 1, 2 * i + 1] = cfg.alpha
    if block_size % 2 != 0:
        block[-1, -1] = cfg.alpha
    ops = np.tile(block, (m, dim // block_size, 1, 1))
    if jitter > 0.0:
        ops = ops + jitter * rng.normal(size=ops.shape)
    return OperatorDictionary(ops, dim)


# ---------------------------------------------------------------------------
# Transport and the manifold reconstruction loss
# ---------------------------------------------------------------------------


def _split_blocks(z: np.ndarray, opdict: OperatorDictionary, name: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != opdict.dim:
        raise ValueError(f"{name} has dim {z.shape[-1]}, expected {opdict.dim}")
    return z.reshape(z.shape[:-1] + (opdict.n_blocks, opdict.block_size))


def _merge_blocks(zb: np.ndarray) -> np.ndarray:
    return zb.reshape(zb.shape[:-2] + (-1,))


def combined_generator(opdict: OperatorDictionary, c: np.ndarray) -> np.ndarray:
    """Per-block weighted sum sum_m c_m Psi_m, shape (..., n_blocks, b, b)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != opdict.m:
        raise ValueError(f"coefficients have dim {c.shape[-1]}, expected {opdict.m}")
    return np.einsum("...m,mjab->...jab", c, opdict.ops)


def transport(opdict: OperatorDictionary, c: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Apply the group element T(c) = expm(sum_m c_m Psi_m) to ``z`` per block.

    ``c`` and ``z`` may carry matching leading batch axes.
    """
    zb = _split_blocks(z, opdict, "z")
    A = combined_generator(opdict, c)
    T = expm(A)
    return _merge_blocks(np.einsum("...ab,...b->...a", T, zb))


@dataclass
class ManifoldLossGrads:
    """Gradients of the blockwise squared transport error."""

    d_ops: np.ndarray   # (m, n_blocks, b, b)
    d_c: np.ndarray     # same leading shape as c
    d_z: np.ndarray     # same shape as z
    d_zp: np.ndarray    # same shape as z'; zeros under stop-grad


def _loss_forward(opdict, Z, Zp, C):
    zb = _split_blocks(Z, opdict, "z")
    zpb = _split_blocks(Zp, opdict, "z'")
    if zb.shape != zpb.shape:
        raise ValueError(f"z and z' shapes differ: {zb.shape} vs {zpb.shape}")
    A = combined_generator(opdict, C)
    T = expm(A)
    r = np.einsum("...ab,...b->...a", T, zb) - zpb
    losses = np.einsum("...ja,...ja->...", r, r)
    return zb, A, T, r, losses


def manifold_loss_values(opdict: OperatorDictionary, Z, Zp, C) -> np.ndarray:
    """Forward-only per-pair loss sum_j ||z'_j - T_j(c) z_j||^2."""
    return _loss_forward(opdict, Z, Zp, C)[-1]


def manifold_loss_batch(
    opdict: OperatorDictionary,
    Z: np.ndarray,
    Zp: np.ndarray,
    C: np.ndarray,
    stop_grad_target: bool = True,
    with_operator_grads: bool = True,
):
    """Per-pair losses plus analytic gradients, batched over leading axes.

    Returns ``(losses, grads)`` where ``grads.d_ops`` is summed over the
    batch and the remaining gradients keep per-pair leading axes. The
    gradient with respect to ``z'`` is defined as zero when
    ``stop_grad_target`` is set.
    """
    zb, A, T, r, losses = _loss_forward(opdict, Z, Zp, C)
    G = 2.0 * r[..., :, None] * zb[..., None, :]
    V = expm_vjp(A, G)
    d_c = np.einsum("...jab,mjab->...m", V, opdict.ops)
    if with_operator_grads:
        C_arr = np.asarray(C, dtype=np.float64)
        d_ops = np.einsum(
            "nm,njab->mjab",
            C_arr.reshape(-1, opdict.m),
            V.reshape((-1,) + opdict.ops.shape[1:]),
        )
    else:
        d_ops = np.zeros_like(opdict.ops)
    d_z = _merge_blocks(np.einsum("...ab,...a->...b", T, 2.0 * r))
    if stop_grad_target:
        d_zp = np.zeros(np.asarray(Zp).shape)
    else:
        d_zp = _merge_blocks(-2.0 * r)
    return losses, ManifoldLossGrads(d_ops=d_ops, d_c=d_c, d_z=d_z, d_zp=d_zp)


def manifold_loss(
    opdict: OperatorDictionary,
    z: np.ndarray,
    zp: np.ndarray,
    c: np.ndarray,
    stop_grad_target: bool = True,
) -> tuple[float, ManifoldLossGrads]:
    """Blockwise transport error for one pair, with all gradients."""
    losses, grads = manifold_loss_batch(opdict, z, zp, c, stop_grad_target)
    return float(losses), grads


def manifold_loss_c_grads(opdict: OperatorDictionary, Z, Zp, C):
    """Losses and coefficient gradients only (the sparse-inference hot path)."""
    losses, grads = manifold_loss_batch(opdict, Z, Zp, C, with_operator_grads=False)
    return losses, grads.d_c


def transport_backward(
    opdict: OperatorDictionary, c: np.ndarray, z: np.ndarray, d_out: np.ndarray
):
    """Vector-Jacobian product through ``transport``.

    Given the gradient of a scalar loss with respect to the transported
    output, returns ``(d_ops, d_c, d_z)``; ``d_ops`` is summed over any batch
    axes, the others keep them.
    """
    zb = _split_blocks(z, opdict, "z")
    gb = _split_blocks(d_out, opdict, "d_out")
    A = combined_generator(opdict, c)
    T = expm(A)
    G = gb[..., :, None] * zb[..., None, :]
    V = expm_vjp(A, G)
    d_c = np.einsum("...jab,mjab->...m", V, opdict.ops)
    d_ops = np.einsum(
        "nm,njab->mjab",
        np.asarray(c, dtype=np.float64).reshape(-1, opdict.m),
        V.reshape((-1,) + opdict.ops.shape[1:]),
    )
    d_z = _merge_blocks(np.einsum("...ab,...a->...b", T, gb))
    return d_ops, d_c, d_z


# ---------------------------------------------------------------------------
# Diagnostics and parameter updates
# ---------------------------------------------------------------------------


def distance_improvement(opdict: OperatorDictionary, z, zp, c) -> float:
    """||z' - T(c) z||^2 / ||z' - z||^2; below 1 means the transport helps."""
    z = np.asarray(z, dtype=np.float64)
    zp = np.asarray(zp, dtype=np.float64)
    base = float(np.sum((zp - z) ** 2))
    if base == 0.0:
        raise ValueError("distance improvement undefined for identical points")
    return float(manifold_loss_values(opdict, z, zp, c)) / base


def distance_improvement_mean(opdict: OperatorDictionary, Z, Zp, C) -> float:
    """Mean distance improvement over a batch, skipping coincident pairs."""
    Z = np.asarray(Z, dtype=np.float64)
    Zp = np.asarray(Zp, dtype=np.float64)
    base = np.sum((Zp - Z) ** 2, axis=-1)
    keep = base > 0.0
    if not np.any(keep):
        raise ValueError("no non-coincident pairs in batch")
    losses = manifold_loss_values(opdict, Z[keep], Zp[keep], np.asarray(C)[keep])
    return float(np.mean(losses / base[keep]))


def frobenius_penalty(opdict: OperatorDictionary) -> float:
    """sum_m ||Psi_m||_F^2 (blocks of one generator contribute jointly)."""
    return float(np.sum(opdict.ops ** 2))


def frobenius_penalty_grad(opdict: OperatorDictionary) -> np.ndarray:
    return 2.0 * opdict.ops


def operator_frobenius_norms(opdict: OperatorDictionary) -> np.ndarray:
    """Frobenius norm per generator, shape (m,)."""
    return np.sqrt(np.sum(opdict.ops ** 2, axis=(1, 2, 3)))


def clip_global_norm(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale so the global l2 norm does not exceed ``clip_norm``."""
    norm = float(np.sqrt(np.sum(np.asarray(grads) ** 2)))
    if np.isfinite(clip_norm) and norm > clip_norm and norm > 0.0:
        return grads * (clip_norm / norm)
    return grads


def grad_clip_and_step(
    opdict: OperatorDictionary,
    grads: np.ndarray,
    lr: float,
    clip_norm: float,
    weight_decay: float,
) -> OperatorDictionary:
    """Clipped gradient step with decoupled weight decay.

    The gradient is first rescaled to global norm at most ``clip_norm``; the
    weight decay multiplies the parameters directly and never passes through
    the clipping.
    """
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != opdict.ops.shape:
        raise ValueError(f"grads shape {grads.shape} != ops shape {opdict.ops.shape}")
    clipped = clip_global_norm(grads, clip_norm)
    new_ops = opdict.ops * (1.0 - lr * weight_decay) - lr * clipped
    return OperatorDictionary(new_ops, opdict.dim)
