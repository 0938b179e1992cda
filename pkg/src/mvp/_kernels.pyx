# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: the xoshiro256** stream, cyclic Jacobi rotations,
the fused momentum update and the FNV-1a checksum.

Signatures mirror ``mvp._pykernels`` exactly; ``mvp.kernels`` picks one.
"""

from libc.math cimport fabs, sqrt
from libc.stdint cimport uint8_t, uint64_t

import numpy as np

cdef double _TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t _next(uint64_t* s) nogil:
    cdef uint64_t result = _rotl(s[1] * 5, 7) * 9
    cdef uint64_t t = s[1] << 17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


def splitmix64_state(uint64_t seed):
    """Expand a 64-bit seed into a 4-word xoshiro state."""
    cdef uint64_t x = seed
    cdef uint64_t z
    out = np.empty(4, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef int i
    for i in range(4):
        x += <uint64_t>0x9E3779B97F4A7C15
        z = x
        z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
        o[i] = z ^ (z >> 31)
    return out


def xoshiro_fill_u64(uint64_t[::1] state, uint64_t[::1] out):
    cdef uint64_t s[4]
    cdef Py_ssize_t i, n = out.shape[0]
    for i in range(4):
        s[i] = state[i]
    with nogil:
        for i in range(n):
            out[i] = _next(s)
    for i in range(4):
        state[i] = s[i]


def xoshiro_fill_uniform(uint64_t[::1] state, double[::1] out):
    cdef uint64_t s[4]
    cdef Py_ssize_t i, n = out.shape[0]
    for i in range(4):
        s[i] = state[i]
    with nogil:
        for i in range(n):
            out[i] = <double>(_next(s) >> 11) * _TWO_M53
    for i in range(4):
        state[i] = s[i]


def jacobi_eigh(double[:, ::1] a, double[:, ::1] vt, double tol, int max_sweeps):
    """Diagonalize symmetric ``a`` in place, accumulating rotations into ``vt``.

    ``vt`` must hold the identity on entry; on exit its rows are the
    eigenvectors. Only rows are touched in the inner loops (columns are
    mirrored), keeping memory access contiguous. Returns the sweep count.
    Convergence: off-diagonal Frobenius norm <= tol * ||a||_F.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, k
    cdef int sweep = 0
    cdef double off, total, tau, t, c, s, apq, app, aqq, x, y
    with nogil:
        total = 0.0
        for p in range(n):
            for q in range(n):
                total += a[p, q] * a[p, q]
        total = sqrt(total)
        while sweep < max_sweeps:
            off = 0.0
            for p in range(n):
                for q in range(p + 1, n):
                    off += a[p, q] * a[p, q]
            off = sqrt(2.0 * off)
            if off <= tol * total:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    app = a[p, p]
                    aqq = a[q, q]
                    tau = (aqq - app) / (2.0 * apq)
                    if tau >= 0.0:
                        t = 1.0 / (tau + sqrt(1.0 + tau * tau))
                    else:
                        t = -1.0 / (-tau + sqrt(1.0 + tau * tau))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = t * c
                    for k in range(n):
                        x = a[p, k]
                        y = a[q, k]
                        a[p, k] = c * x - s * y
                        a[q, k] = s * x + c * y
                    a[p, p] = app - t * apq
                    a[q, q] = aqq + t * apq
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for k in range(n):
                        if k != p and k != q:
                            a[k, p] = a[p, k]
                            a[k, q] = a[q, k]
                    for k in range(n):
                        x = vt[p, k]
                        y = vt[q, k]
                        vt[p, k] = c * x - s * y
                        vt[q, k] = s * x + c * y
            sweep += 1
    return sweep


def momentum_step(double[::1] theta, double[::1] buf, const double[::1] grad, double mu, double lr):
    """``buf = mu * buf + grad; theta -= lr * buf`` in one pass over flat arrays."""
    cdef Py_ssize_t i, n = theta.shape[0]
    cdef double b
    with nogil:
        for i in range(n):
            b = mu * buf[i]
            b = b + grad[i]
            buf[i] = b
            theta[i] = theta[i] - lr * b


def fnv1a64(const uint8_t[::1] data, uint64_t h=0xCBF29CE484222325):
    """64-bit FNV-1a hash of ``data``, continuing from ``h``."""
    cdef Py_ssize_t i, n = data.shape[0]
    with nogil:
        for i in range(n):
            h = (h ^ data[i]) * <uint64_t>0x100000001B3
    return h
