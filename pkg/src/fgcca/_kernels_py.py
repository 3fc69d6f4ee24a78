"""Pure numpy fallback for the compiled smoothing-moment kernels.

Same signatures and output layout as ``fgcca._kernels``. Data are processed
in chunks so the dense kernel-weight matrices stay bounded in memory.
"""

import numpy as np

_CHUNK = 16384


def _epan(d: np.ndarray, h: float) -> np.ndarray:
    u = d / h
    return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)


def moments_1d(x, y, grid, h):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    out = np.zeros((grid.size, 5))
    for lo in range(0, x.size, _CHUNK):
        xs, ys = x[lo:lo + _CHUNK], y[lo:lo + _CHUNK]
        d = xs[None, :] - grid[:, None]
        k = _epan(d, h)
        kd = k * d
        out[:, 0] += k.sum(axis=1)
        out[:, 1] += kd.sum(axis=1)
        out[:, 2] += (kd * d).sum(axis=1)
        out[:, 3] += k @ ys
        out[:, 4] += kd @ ys
    return out


def moments_2d(s, t, z, grid_s, grid_t, hs, ht):
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    grid_s = np.asarray(grid_s, dtype=np.float64)
    grid_t = np.asarray(grid_t, dtype=np.float64)
    out = np.zeros((grid_s.size, grid_t.size, 9))
    for lo in range(0, s.size, _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        ds = s[sl][None, :] - grid_s[:, None]
        dt = t[sl][None, :] - grid_t[:, None]
        ks = _epan(ds, hs)
        kt = _epan(dt, ht)
        zc = z[sl][None, :]
        a0, a1, a2 = ks, ks * ds, ks * ds * ds
        b0, b1, b2 = kt, kt * dt, kt * dt * dt
        out[..., 0] += a0 @ b0.T
        out[..., 1] += a1 @ b0.T
        out[..., 2] += a0 @ b1.T
        out[..., 3] += a2 @ b0.T
        out[..., 4] += a1 @ b1.T
        out[..., 5] += a0 @ b2.T
        out[..., 6] += a0 @ (b0 * zc).T
        out[..., 7] += a1 @ (b0 * zc).T
        out[..., 8] += a0 @ (b1 * zc).T
    return out
