"""Pure-numpy kernels, bitwise equivalent to the compiled core.

The stencil applies taps axis by axis in a fixed order, so every grid point
sees the same sequence of IEEE operations regardless of slab decomposition
or backend. The matmul accumulates strictly in k order (a loop of outer
products is, per element, the same left fold as an ijk triple loop).
"""

from __future__ import annotations

import numpy as np


def stencil_update(u_next: np.ndarray, u_cur: np.ndarray, u_prev: np.ndarray,
                   center: float, wx: np.ndarray, wy: np.ndarray,
                   wz: np.ndarray, radius: int):
    r = radius
    core = (slice(r, u_cur.shape[0] - r), slice(r, u_cur.shape[1] - r),
            slice(r, u_cur.shape[2] - r))
    u = u_cur[core]
    acc = center * u
    for t in range(1, r + 1):
        acc += wx[t] * (u_cur[r + t:u_cur.shape[0] - r + t, core[1], core[2]]
                        + u_cur[r - t:u_cur.shape[0] - r - t, core[1], core[2]])
    for t in range(1, r + 1):
        acc += wy[t] * (u_cur[core[0], r + t:u_cur.shape[1] - r + t, core[2]]
                        + u_cur[core[0], r - t:u_cur.shape[1] - r - t, core[2]])
    for t in range(1, r + 1):
        acc += wz[t] * (u_cur[core[0], core[1], r + t:u_cur.shape[2] - r + t]
                        + u_cur[core[0], core[1], r - t:u_cur.shape[2] - r - t])
    u_next[core] = 2.0 * u - u_prev[core] + acc


def matmul_f64(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    c[:] = 0.0
    for k in range(a.shape[1]):
        c += np.outer(a[:, k], b[k, :])
