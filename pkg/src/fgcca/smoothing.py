"""Local-linear kernel smoothers (Epanechnikov) in one and two dimensions.

The moment accumulation runs in the compiled ``_kernels`` extension when it
is importable and falls back to numpy otherwise. ``BACKEND`` names the one in
use; set ``FGCCA_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import BandwidthTooSmallError

if os.environ.get("FGCCA_PURE_PYTHON"):
    from . import _kernels_py as _backend

    BACKEND = "python"
else:
    try:
        from . import _kernels as _backend

        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _kernels_py as _backend

        BACKEND = "python"

_DEGENERATE = 1e-10


def _as_c(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _resolve(backend):
    """``None`` (active backend), ``"python"``, ``"cython"`` or a module."""
    if backend is None:
        return _backend
    if backend == "python":
        from . import _kernels_py

        return _kernels_py
    if backend == "cython":
        from . import _kernels

        return _kernels
    return backend


def moments_1d(x, y, grid, h, backend=None):
    be = _resolve(backend)
    return be.moments_1d(_as_c(x), _as_c(y), _as_c(grid), float(h))


def moments_2d(s, t, z, grid_s, grid_t, hs, ht, backend=None):
    be = _resolve(backend)
    return be.moments_2d(
        _as_c(s), _as_c(t), _as_c(z), _as_c(grid_s), _as_c(grid_t), float(hs), float(ht)
    )


def solve_1d(mom: np.ndarray, grid) -> np.ndarray:
    """Local-linear intercepts from accumulated 1-D moments."""
    S0, S1, S2, T0, T1 = mom.T
    grid = np.asarray(grid)
    empty = S0 <= 0
    if np.any(empty):
        raise BandwidthTooSmallError(
            "no observation inside the kernel window", point=float(grid[np.argmax(empty)])
        )
    det = S0 * S2 - S1 * S1
    bad = det <= _DEGENERATE * S0 * S2
    if np.any(bad):
        raise BandwidthTooSmallError(
            "fewer than two distinct times inside the kernel window",
            point=float(grid[np.argmax(bad)]),
        )
    return (S2 * T0 - S1 * T1) / det


def local_linear_1d(x, y, grid, h, backend=None) -> np.ndarray:
    """Smooth scatter ``(x, y)`` and evaluate on ``grid`` with bandwidth ``h``."""
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    return solve_1d(moments_1d(x, y, grid, h, backend), grid)


def solve_2d(mom: np.ndarray, grid_s, grid_t) -> np.ndarray:
    S00, S10, S01, S20, S11, S02, T00, T10, T01 = np.moveaxis(mom, -1, 0)
    empty = S00 <= 0
    if np.any(empty):
        a, b = np.unravel_index(np.argmax(empty), empty.shape)
        raise BandwidthTooSmallError(
            "no raw covariance inside the kernel window",
            point=float(np.asarray(grid_s)[a]),
        )
    A = np.stack(
        [
            np.stack([S00, S10, S01], axis=-1),
            np.stack([S10, S20, S11], axis=-1),
            np.stack([S01, S11, S02], axis=-1),
        ],
        axis=-2,
    )
    rhs = np.stack([T00, T10, T01], axis=-1)
    # scale-free degeneracy check: det relative to the product of the diagonal
    det = np.linalg.det(A)
    scale = S00 * S20 * S02
    bad = ~(det > _DEGENERATE * scale)
    if np.any(bad):
        a, b = np.unravel_index(np.argmax(bad), bad.shape)
        raise BandwidthTooSmallError(
            "degenerate local design for the surface smoother",
            point=float(np.asarray(grid_s)[a]),
        )
    beta = np.linalg.solve(A, rhs[..., None])[..., 0]
    return beta[..., 0]


def local_linear_2d(s, t, z, grid_s, grid_t, hs, ht=None, backend=None) -> np.ndarray:
    """Smooth ``z`` observed at ``(s, t)`` onto ``grid_s x grid_t``."""
    ht = hs if ht is None else ht
    if not (hs > 0 and ht > 0):
        raise ValueError("bandwidth must be positive")
    return solve_2d(moments_2d(s, t, z, grid_s, grid_t, hs, ht, backend), grid_s, grid_t)


def gcv_bandwidth_1d(x, y, candidates) -> float:
    """Pick the bandwidth minimizing generalized cross-validation.

    Fitted values are evaluated at the distinct observation times; the hat
    diagonal of a local-linear smoother at its own location is
    ``K(0) S2 / (S0 S2 - S1^2)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ux, inv = np.unique(x, return_inverse=True)
    n = x.size
    best, best_score = None, np.inf
    for h in candidates:
        mom = moments_1d(x, y, ux, h)
        S0, S1, S2, T0, T1 = mom.T
        det = S0 * S2 - S1 * S1
        if np.any(det <= _DEGENERATE * S0 * S2):
            continue
        fit = (S2 * T0 - S1 * T1) / det
        lev = 0.75 * S2 / det
        trace = lev[inv].sum()
        if trace >= n:
            continue
        rss = np.sum((y - fit[inv]) ** 2)
        score = rss / n / (1.0 - trace / n) ** 2
        if score < best_score:
            best, best_score = float(h), score
    if best is None:
        raise BandwidthTooSmallError("no candidate bandwidth gives a well-posed smoother")
    return best


def cv_bandwidth_1d(x, y, groups, candidates) -> float:
    """Pick the bandwidth minimizing leave-one-subject-out prediction error.

    Moments are additive, so each subject's own contribution is subtracted
    from the pooled moments at its observation times instead of refitting.
    A candidate that leaves some held-out point without support is skipped.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    groups = np.asarray(groups)
    ux, inv = np.unique(x, return_inverse=True)
    members = [np.flatnonzero(groups == g) for g in np.unique(groups)]
    best, best_score = None, np.inf
    for h in candidates:
        pooled = moments_1d(x, y, ux, h)
        sse, ok = 0.0, True
        for idx in members:
            own = moments_1d(x[idx], y[idx], x[idx], h)
            S0, S1, S2, T0, T1 = (pooled[inv[idx]] - own).T
            det = S0 * S2 - S1 * S1
            if np.any(~(S0 > 0)) or np.any(det <= _DEGENERATE * np.abs(S0 * S2)):
                ok = False
                break
            sse += float(np.sum((y[idx] - (S2 * T0 - S1 * T1) / det) ** 2))
        if ok and sse < best_score:
            best, best_score = float(h), sse
    if best is None:
        raise BandwidthTooSmallError("no candidate bandwidth leaves every subject predictable")
    return best
