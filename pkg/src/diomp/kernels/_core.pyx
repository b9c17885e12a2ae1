# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: order-2R acoustic stencil update and a fixed-order
triple-loop matmul. Arithmetic orders match kernels/reference.py exactly
(compiled with -ffp-contract=off), so both backends are bitwise equal."""

import numpy as np


def stencil_update(double[:, :, ::1] u_next, double[:, :, ::1] u_cur,
                   double[:, :, ::1] u_prev, double center,
                   double[::1] wx, double[::1] wy, double[::1] wz,
                   Py_ssize_t radius):
    """u_next = 2*u_cur - u_prev + lap on the interior (ghost width = radius).

    Per point: acc = center*u; then x taps 1..R, y taps, z taps, each as
    acc += w[t]*(u[+t] + u[-t]); finally 2*u - u_prev + acc.
    """
    cdef Py_ssize_t nx = u_cur.shape[0], ny = u_cur.shape[1], nz = u_cur.shape[2]
    cdef Py_ssize_t i, j, k, t
    cdef double acc
    with nogil:
        for i in range(radius, nx - radius):
            for j in range(radius, ny - radius):
                for k in range(radius, nz - radius):
                    acc = center * u_cur[i, j, k]
                    for t in range(1, radius + 1):
                        acc = acc + wx[t] * (u_cur[i + t, j, k] + u_cur[i - t, j, k])
                    for t in range(1, radius + 1):
                        acc = acc + wy[t] * (u_cur[i, j + t, k] + u_cur[i, j - t, k])
                    for t in range(1, radius + 1):
                        acc = acc + wz[t] * (u_cur[i, j, k + t] + u_cur[i, j, k - t])
                    u_next[i, j, k] = 2.0 * u_cur[i, j, k] - u_prev[i, j, k] + acc


def matmul_f64(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c):
    """c = a @ b with per-element accumulation strictly in k order."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[1], kk = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(kk):
                    acc = acc + a[i, k] * b[k, j]
                c[i, j] = acc
