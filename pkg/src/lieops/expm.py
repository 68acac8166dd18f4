"""Matrix exponential, its Frechet derivative, and the adjoint map.

All routines work in float64 on dense real matrices. Inputs may be a single
``(n, n)`` matrix or a stack ``(..., n, n)``; every matrix in a stack goes
through exactly the same sequence of floating point operations as it would
alone, so stacked and one-at-a-time results agree bitwise. This is what lets
a block-diagonal exponential be computed as a batch over blocks without
changing any numbers.

The exponential uses the standard double precision degree-13 Pade approximant
with norm-based scaling and repeated squaring. The Frechet derivative is
obtained from the exponential of the augmented block matrix

    [[A, E],
     [0, A]]

whose upper-right block equals L(A, E). The adjoint (needed for reverse-mode
gradients) follows from L*(A, G) = L(A^T, G).
"""

from __future__ import annotations

import numpy as np

# Numerator coefficients b_0..b_13 of the degree-13 Pade approximant and the
# 1-norm threshold below which no scaling is required.
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152


def _as_square_stack(A: np.ndarray, name: str) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2] or A.shape[-1] < 1:
        raise ValueError(f"{name} must have shape (..., n, n) with n >= 1, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


def _pade13(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b = _PADE13
    eye = np.eye(A.shape[-1])
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * eye)
    V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
         + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * eye)
    return U, V


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential e^A via scaling-and-squaring with a Pade approximant.

    Args:
        A: real matrix of shape (n, n), or a stack (..., n, n).

    Returns:
        e^A with the same shape as ``A``. Deterministic for fixed input.

    Raises:
        ValueError: if ``A`` is not square or contains non-finite entries.
    """
    A = _as_square_stack(A, "A")
    n = A.shape[-1]
    norm1 = np.abs(A).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.maximum(np.ceil(np.log2(norm1 / _THETA13)), 0.0)
    s = s.astype(np.int64)
    A_scaled = A * np.power(2.0, -s.astype(np.float64))[..., None, None]
    U, V = _pade13(A_scaled)
    # (V - U)^{-1} (V + U) written as I + (V - U)^{-1} 2U: identical algebra,
    # but exact at A = 0 and free of cancellation for small ||A||.
    R = np.eye(n) + np.linalg.solve(V - U, 2.0 * U)
    s_max = int(s.max()) if s.size else 0
    if s_max:
        flat_R = R.reshape(-1, n, n)
        flat_s = s.reshape(-1)
        for k in range(s_max):
            live = flat_s > k
            flat_R[live] = flat_R[live] @ flat_R[live]
        R = flat_R.reshape(A.shape)
    return R


def expm_frechet(A: np.ndarray, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential and its Frechet derivative at ``A`` in direction ``E``.

    Both are read off the exponential of the 2n x 2n augmented block matrix,
    so the pair is internally consistent.

    Args:
        A: real matrix (n, n) or stack (..., n, n).
        E: perturbation direction, same shape as ``A``.

    Returns:
        Tuple ``(e^A, L(A, E))`` where ``L`` is linear in ``E`` and satisfies
        expm(A + hE) = e^A + h L(A, E) + o(h).

    Raises:
        ValueError: on shape mismatch or non-finite entries.
    """
    A = _as_square_stack(A, "A")
    E = _as_square_stack(E, "E")
    if A.shape != E.shape:
        raise ValueError(f"A and E must have equal shapes, got {A.shape} vs {E.shape}")
    n = A.shape[-1]
    aug = np.zeros(A.shape[:-2] + (2 * n, 2 * n))
    aug[..., :n, :n] = A
    aug[..., :n, n:] = E
    aug[..., n:, n:] = A
    big = expm(aug)
    return big[..., :n, :n], big[..., :n, n:]


def expm_vjp(A: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Adjoint of the Frechet derivative: the vector-Jacobian product of expm.

    Returns L*(A, G) = L(A^T, G), which satisfies
    <G, L(A, E)> = <L*(A, G), E> in the Frobenius inner product for every E.
    If ``G`` is the gradient of a scalar loss with respect to e^A, the result
    is the gradient with respect to ``A``.

    Raises:
        ValueError: on shape mismatch or non-finite entries.
    """
    A = _as_square_stack(A, "A")
    G = _as_square_stack(G, "G")
    if A.shape != G.shape:
        raise ValueError(f"A and G must have equal shapes, got {A.shape} vs {G.shape}")
    _, adj = expm_frechet(np.swapaxes(A, -1, -2), G)
    return adj
