"""Zero-mean Gaussian-process draws from a composed kernel.

Draws use a dense Cholesky factor of the Gram matrix. Composed kernels are
frequently rank deficient (a linear kernel alone has rank one), so the
factorization walks a jitter ladder until it succeeds.

Standard normals come from numpy's ``Generator.standard_normal`` (ziggurat),
so a given ``(seed, kernel)`` pair reproduces bit-identically within one
numpy build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FactorizationFailed
from .kernels import KernelExpr, evaluate_kernel, unit_grid

JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)

# relative Frobenius error allowed between L @ L.T and the jittered matrix
RECONSTRUCTION_TOL = 1e-8


@dataclass
class LatentDraw:
    values: np.ndarray
    kernel: KernelExpr
    jitter_used: float


def cholesky_with_jitter(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K + jitter * I`` for the smallest workable jitter.

    The jitter levels are :data:`JITTER_LADDER` scaled by the mean diagonal
    of ``K`` (or by 1 if that mean is zero).

    Returns
    -------
    L : ndarray
        Lower-triangular factor.
    jitter : float
        Absolute jitter added to the diagonal.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise FactorizationFailed("matrix has non-finite entries")
    scale = float(np.mean(np.diag(K)))
    if scale <= 0.0:
        scale = 1.0
    eye = np.eye(K.shape[0])
    for level in JITTER_LADDER:
        jitter = level * scale
        target = K + jitter * eye if jitter else K
        try:
            L = np.linalg.cholesky(target)
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(L)):
            continue
        norm = np.linalg.norm(target)
        err = np.linalg.norm(L @ L.T - target)
        if norm == 0.0 or err <= RECONSTRUCTION_TOL * norm:
            return L, jitter
    raise FactorizationFailed(
        f"Cholesky failed up to jitter {JITTER_LADDER[-1]:g} x {scale:g}; kernel is malformed"
    )


def sample_latent(expr: KernelExpr, T: int, rng: np.random.Generator) -> LatentDraw:
    """One GP realization of length ``T`` on the unit grid."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    K = evaluate_kernel(expr, unit_grid(T))
    L, jitter = cholesky_with_jitter(K)
    z = rng.standard_normal(T)
    return LatentDraw(values=L @ z, kernel=expr, jitter_used=jitter)
