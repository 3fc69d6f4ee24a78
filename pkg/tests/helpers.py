"""Random covariance models and small fixtures shared by the test modules."""

import numpy as np

from fgcca.grid import GridOperator, TimeGrid
from fgcca.simulation import fourier_basis


def smooth_basis(rng, grid, r):
    """``r`` random smooth functions on ``grid`` (random Fourier mixtures), shape ``(r, G)``."""
    phi = fourier_basis(9, grid)
    return rng.standard_normal((r, 9)) @ phi


def random_joint_cov(rng, J, rank=4, sizes=None):
    """Kernels ``Sigma_jk = B_j S_jk B_k^T`` from one random PSD score covariance.

    Returns ``(grids, kernels)`` with ``kernels[j][k]`` a full ``G_j x G_k`` array.
    """
    sizes = sizes or [int(rng.integers(21, 41)) for _ in range(J)]
    grids = [TimeGrid.uniform(0.0, float(rng.uniform(0.5, 2.0)), n) for n in sizes]
    B = [smooth_basis(rng, g, rank) for g in grids]
    A = rng.standard_normal((J * rank, J * rank))
    S = A @ A.T / (J * rank)
    kernels = [
        [B[j].T @ S[j * rank:(j + 1) * rank, k * rank:(k + 1) * rank] @ B[k] for k in range(J)]
        for j in range(J)
    ]
    for j in range(J):
        kernels[j][j] = (kernels[j][j] + kernels[j][j].T) / 2
    return grids, kernels


def as_table(grids, kernels):
    J = len(grids)
    return [[GridOperator(grids[j], grids[k], kernels[j][k]) for k in range(J)] for j in range(J)]


def random_table(rng, J, rank=4, sizes=None):
    return as_table(*random_joint_cov(rng, J, rank, sizes))


def random_design(rng, J):
    """Symmetric, zero-diagonal, connected design with random positive weights."""
    while True:
        C = np.triu(rng.uniform(0.2, 1.0, (J, J)) * (rng.uniform(size=(J, J)) < 0.8), 1)
        C = C + C.T
        if J == 2 and C[0, 1] > 0:
            return C
        if J > 2 and np.all((C > 0).sum(axis=1) > 0):
            return C


def cosine(f, g, w):
    return float(np.dot(w * f, g) / np.sqrt(np.dot(w * f, f) * np.dot(w * g, g)))
